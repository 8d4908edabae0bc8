use crate::{Error, Graph, ParamId, ParameterStore, Result, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

fn eval<F, E>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g).map_err(|e| Error::Callback(e.to_string()))?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss = {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients against central differences for every
/// coordinate of every trainable parameter (frozen rows are skipped).
///
/// The error per coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F, E>(store: &ParameterStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> std::result::Result<Var, E>,
    E: std::fmt::Display,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let grads = {
        let mut g = Graph::new(store);
        let loss = f(&mut g).map_err(|e| Error::Callback(e.to_string()))?;
        g.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().filter(|id| store.is_trainable(*id)).collect();
    for id in ids {
        let analytic = grads.param(id);
        let len = store.get(id).len();
        let cols = store.get(id).shape().last().copied().unwrap_or(1);
        let frozen = store.frozen_rows(id).to_vec();
        for k in 0..len {
            if frozen.contains(&(k / cols)) {
                continue;
            }
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[k]);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}[{k}]", store.name(id))));
            }
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
