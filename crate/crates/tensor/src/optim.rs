use crate::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer. Moment buffers live in the store so that a
/// checkpoint captures the whole optimizer state.
#[derive(Debug, Clone, Copy, Default)]
pub struct Adam {
    pub config: AdamConfig,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            config: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        }
    }

    /// One bias-corrected update of every trainable parameter that holds a
    /// gradient, then clears all gradient slots.
    pub fn step(&self, store: &mut ParameterStore) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in store.params_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let n = grad.len();
            let m = p.moment1.get_or_insert_with(|| vec![0.0; n]);
            let v = p.moment2.get_or_insert_with(|| vec![0.0; n]);
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Functional form of [`Adam::step`].
pub fn adam_step(store: &mut ParameterStore, lr: f64) {
    Adam::new(lr).step(store)
}
