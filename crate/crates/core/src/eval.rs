//! Ranking metrics, per-subset reports and the experiment harnesses built on them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ufrec_tensor::{read_payload, write_payload, Tensor};

use crate::config::EvalMode;
use crate::data::{sample_negatives, SplitDataset, Target};
use crate::error::{Error, Result};
use crate::model::{Channel, Model};
use crate::partition::Partition;
use crate::seed;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// `(ndcg, hr, mrr)` for a single relevant item at 1-based `rank`.
pub fn rank_metrics(rank: Option<usize>, k: usize) -> (f64, f64, f64) {
    match rank {
        Some(r) if r >= 1 && r <= k => (1.0 / ((r + 1) as f64).log2(), 1.0, 1.0 / r as f64),
        _ => (0.0, 0.0, 0.0),
    }
}

/// 1 + number of negatives scoring at least as high as the positive.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

/// Anything that scores candidate items for a user given the preceding history.
pub trait Scorer: Sync {
    fn score(&self, user: usize, items: &[usize], times: &[i64], target_time: i64, candidates: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, user: usize, items: &[usize], times: &[i64], target_time: i64, candidates: &[usize]) -> Result<Vec<f64>> {
        let enc = self.encode_user(user, items, times, target_time)?;
        Model::score(self, &enc, candidates)
    }
}

/// Uniform random scores, reproducible per user.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, user: usize, _: &[usize], _: &[i64], _: i64, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut rng = seed::rng(self.seed, &[user as u64]);
        Ok(candidates.iter().map(|_| rng.gen::<f64>()).collect())
    }
}

/// Forces every user through one channel of a model.
pub struct ChannelScorer<'a> {
    pub model: &'a Model,
    pub channel: Channel,
}

impl Scorer for ChannelScorer<'_> {
    fn score(&self, _: usize, items: &[usize], times: &[i64], target_time: i64, candidates: &[usize]) -> Result<Vec<f64>> {
        let enc = self.model.encode_with(self.channel, items, times, target_time)?;
        self.model.score(&enc, candidates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    pub negatives: usize,
    pub seed: u64,
    pub target: Target,
}

impl EvalOptions {
    pub fn sampled(ks: &[usize], negatives: usize, seed_value: u64, target: Target) -> Self {
        Self {
            mode: EvalMode::Sampled,
            ks: ks.to_vec(),
            negatives,
            seed: seed_value,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserOutcome {
    pub user: usize,
    pub rank: usize,
    pub uniform: bool,
    pub frequent_target: bool,
}

pub const SCOPES: [&str; 5] = ["overall", "uniform", "non_uniform", "frequent", "less_frequent"];

fn in_scope(o: &UserOutcome, scope: &str) -> bool {
    match scope {
        "overall" => true,
        "uniform" => o.uniform,
        "non_uniform" => !o.uniform,
        "frequent" => o.frequent_target,
        "less_frequent" => !o.frequent_target,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeMetrics {
    pub count: usize,
    /// Keys like `NDCG@10`, `HR@20`, `MRR@10`.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    pub scopes: BTreeMap<String, ScopeMetrics>,
}

impl MetricReport {
    pub fn from_outcomes(outcomes: &[UserOutcome], mode: EvalMode, ks: &[usize]) -> Self {
        let mut scopes = BTreeMap::new();
        for scope in SCOPES {
            let members: Vec<&UserOutcome> = outcomes.iter().filter(|o| in_scope(o, scope)).collect();
            let mut metrics = BTreeMap::new();
            for &k in ks {
                let mut sums = (0.0, 0.0, 0.0);
                for o in &members {
                    let (n, h, m) = rank_metrics(Some(o.rank), k);
                    sums = (sums.0 + n, sums.1 + h, sums.2 + m);
                }
                let c = members.len().max(1) as f64;
                metrics.insert(format!("NDCG@{k}"), sums.0 / c);
                metrics.insert(format!("HR@{k}"), sums.1 / c);
                metrics.insert(format!("MRR@{k}"), sums.2 / c);
            }
            scopes.insert(
                scope.to_string(),
                ScopeMetrics {
                    count: members.len(),
                    metrics,
                },
            );
        }
        Self {
            mode,
            ks: ks.to_vec(),
            scopes,
        }
    }

    pub fn get(&self, scope: &str, metric: &str, k: usize) -> Option<f64> {
        self.scopes.get(scope)?.metrics.get(&format!("{metric}@{k}")).copied()
    }

    fn metric_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for m in ["NDCG", "HR", "MRR"] {
            for k in &self.ks {
                cols.push(format!("{m}@{k}"));
            }
        }
        cols
    }

    pub fn to_csv(&self) -> String {
        let cols = self.metric_columns();
        let mut out = format!("scope,count,{}\n", cols.join(","));
        for scope in SCOPES {
            if let Some(s) = self.scopes.get(scope) {
                let vals: Vec<String> = cols.iter().map(|c| s.metrics[c].to_string()).collect();
                out.push_str(&format!("{scope},{},{}\n", s.count, vals.join(",")));
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join(METRICS_JSON);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(METRICS_CSV);
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

fn target_tag(target: Target) -> u64 {
    match target {
        Target::Valid => 1,
        Target::Test => 2,
    }
}

/// Ranks each user's held-out item and aggregates by scope. Users are
/// processed in parallel; outcomes are ordered by user id.
pub fn evaluate<S: Scorer>(scorer: &S, data: &SplitDataset, labels: &Partition, opts: &EvalOptions) -> Result<MetricReport> {
    let outcomes = rank_users(scorer, data, labels, opts)?;
    Ok(MetricReport::from_outcomes(&outcomes, opts.mode, &opts.ks))
}

pub fn rank_users<S: Scorer>(scorer: &S, data: &SplitDataset, labels: &Partition, opts: &EvalOptions) -> Result<Vec<UserOutcome>> {
    let warned = AtomicBool::new(false);
    data.users
        .par_iter()
        .map(|u| {
            let held = u.holdout(opts.target);
            let (items, times) = u.context(opts.target, data.order);
            let candidates = match opts.mode {
                EvalMode::Sampled => {
                    let history = u.history();
                    let available = data.num_items - history.iter().filter(|&&i| i <= data.num_items).count();
                    let n = opts.negatives.min(available);
                    if n < opts.negatives && !warned.swap(true, Ordering::Relaxed) {
                        log::warn!(
                            "only {available} items outside user {}'s history; sampling {n} of {} negatives",
                            u.user,
                            opts.negatives
                        );
                    }
                    let mut rng = seed::rng(opts.seed, &[seed::stream::EVAL, u.user as u64, target_tag(opts.target)]);
                    let mut c = vec![held.item];
                    c.extend(sample_negatives(u.user, &history, data.num_items, n, &mut rng)?);
                    c
                }
                EvalMode::Full => {
                    let seen: HashSet<usize> = u.train.iter().copied().collect();
                    let mut c = vec![held.item];
                    c.extend((1..=data.num_items).filter(|i| *i != held.item && !seen.contains(i)));
                    c
                }
            };
            let scores = scorer.score(u.user, &items, &times, held.timestamp, &candidates)?;
            Ok(UserOutcome {
                user: u.user,
                rank: pessimistic_rank(scores[0], &scores[1..]),
                uniform: labels.is_uniform(u.user).unwrap_or(false),
                frequent_target: labels.items.is_frequent(held.item),
            })
        })
        .collect()
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `sequence` or `item`: which ratio varies.
    pub axis: String,
    pub ratio: f64,
    pub report: MetricReport,
}

/// Re-partitions at each ratio and evaluates the model supplied for that cell.
/// The sequence axis varies the uniform ratio with the item ratio fixed, and vice versa.
pub fn study_sweep<F>(
    data: &SplitDataset,
    seq_grid: &[f64],
    item_grid: &[f64],
    fixed: (f64, f64),
    mode: crate::partition::PartitionMode,
    opts: &EvalOptions,
    mut model_for: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(f64, f64) -> Result<Model>,
{
    let mut rows = Vec::new();
    let cells = seq_grid
        .iter()
        .map(|&r| ("sequence", r, (r, fixed.1)))
        .chain(item_grid.iter().map(|&r| ("item", r, (fixed.0, r))));
    for (axis, ratio, (ur, fr)) in cells {
        let labels = Partition::from_split(data, ur, fr, mode)?;
        let model = model_for(ur, fr)?;
        rows.push(SweepRow {
            axis: axis.to_string(),
            ratio,
            report: evaluate(&model, data, &labels, opts)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let cols = first.report.metric_columns();
    let mut out = format!("axis,ratio,scope,count,{}\n", cols.join(","));
    for r in rows {
        for scope in SCOPES {
            let s = &r.report.scopes[scope];
            let vals: Vec<String> = cols.iter().map(|c| s.metrics[c].to_string()).collect();
            out.push_str(&format!("{},{},{scope},{},{}\n", r.axis, r.ratio, s.count, vals.join(",")));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub scope: String,
    pub metric: String,
    pub interval: f64,
    pub context: f64,
    /// `interval − context`; positive means the interval channel wins.
    pub difference: f64,
}

pub fn time_sensitivity(interval: &MetricReport, context: &MetricReport) -> Vec<SensitivityRow> {
    let mut rows = Vec::new();
    for scope in SCOPES {
        let (Some(a), Some(b)) = (interval.scopes.get(scope), context.scopes.get(scope)) else {
            continue;
        };
        for (metric, &va) in &a.metrics {
            if let Some(&vb) = b.metrics.get(metric) {
                rows.push(SensitivityRow {
                    scope: scope.to_string(),
                    metric: metric.clone(),
                    interval: va,
                    context: vb,
                    difference: va - vb,
                });
            }
        }
    }
    rows
}

pub fn sensitivity_csv(rows: &[SensitivityRow]) -> String {
    let mut out = String::from("scope,metric,interval,context,difference\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.scope, r.metric, r.interval, r.context, r.difference));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSidecar {
    pub user: usize,
    pub variant: String,
    pub shape: Vec<usize>,
    pub channel: Channel,
    pub target_item: usize,
    pub score: f64,
}

pub fn case_paths(dir: &Path, user: usize, variant: &str) -> (PathBuf, PathBuf) {
    let stem = format!("case_{user}_{variant}");
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

/// Writes the final-layer sequence encoding of `user` (test context) and the
/// score of `target_item` (defaults to the held-out test item).
pub fn case_dump(model: &Model, data: &SplitDataset, user: usize, target_item: Option<usize>, variant: &str, dir: &Path) -> Result<CaseSidecar> {
    let u = data.user(user).ok_or_else(|| Error::UnknownUser(user.to_string()))?;
    let held = u.holdout(Target::Test);
    let (items, times) = u.context(Target::Test, data.order);
    let enc = model.encode_user(user, &items, &times, held.timestamp)?;
    let target = target_item.unwrap_or(held.item);
    let score = model.score(&enc, &[target])?[0];
    let sidecar = CaseSidecar {
        user,
        variant: variant.to_string(),
        shape: enc.sequence.shape().to_vec(),
        channel: enc.channel,
        target_item: target,
        score,
    };
    let (bin, json) = case_paths(dir, user, variant);
    let mut buf = Vec::new();
    write_payload(&mut buf, enc.sequence.data())?;
    fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(sidecar)
}

pub fn read_case(dir: &Path, user: usize, variant: &str) -> Result<(Tensor, CaseSidecar)> {
    let (bin, json) = case_paths(dir, user, variant);
    for p in [&bin, &json] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let sidecar: CaseSidecar = serde_json::from_str(&fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?)?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n = sidecar.shape.iter().product();
    let data = read_payload(&mut bytes.as_slice(), n)?;
    Ok((Tensor::new(sidecar.shape.clone(), data)?, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(rank_metrics(Some(1), 10), (1.0, 1.0, 1.0));
        let (n, h, m) = rank_metrics(Some(3), 10);
        assert_eq!((n, h), (0.5, 1.0));
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rank_metrics(Some(12), 10), (0.0, 0.0, 0.0));
        assert_eq!(rank_metrics(None, 10), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_rank_pessimistically() {
        assert_eq!(pessimistic_rank(1.0, &[1.0, 1.0, 0.5]), 3);
        assert_eq!(pessimistic_rank(2.0, &[1.0]), 1);
    }

    #[test]
    fn scope_weighted_average_matches_overall() {
        let outcomes: Vec<UserOutcome> = (0..40)
            .map(|u| UserOutcome {
                user: u,
                rank: 1 + (u * 7) % 30,
                uniform: u % 3 == 0,
                frequent_target: u % 4 != 0,
            })
            .collect();
        let r = MetricReport::from_outcomes(&outcomes, EvalMode::Sampled, &[10, 20]);
        for pair in [("uniform", "non_uniform"), ("frequent", "less_frequent")] {
            let a = &r.scopes[pair.0];
            let b = &r.scopes[pair.1];
            assert_eq!(a.count + b.count, 40);
            for key in r.scopes["overall"].metrics.keys() {
                let w = (a.metrics[key] * a.count as f64 + b.metrics[key] * b.count as f64) / 40.0;
                assert!((w - r.scopes["overall"].metrics[key]).abs() < 1e-12);
            }
        }
        for s in r.scopes.values() {
            for k in [10, 20] {
                assert!(s.metrics[&format!("HR@{k}")] >= s.metrics[&format!("NDCG@{k}")]);
            }
        }
        assert!(r.to_csv().starts_with("scope,count,NDCG@10,NDCG@20,HR@10"));
    }

    #[test]
    fn sensitivity_of_identical_reports_is_zero() {
        let outcomes = vec![UserOutcome {
            user: 0,
            rank: 2,
            uniform: true,
            frequent_target: false,
        }];
        let r = MetricReport::from_outcomes(&outcomes, EvalMode::Sampled, &[10]);
        let rows = time_sensitivity(&r, &r);
        assert_eq!(rows.len(), SCOPES.len() * 3);
        assert!(rows.iter().all(|row| row.difference == 0.0));
    }
}
