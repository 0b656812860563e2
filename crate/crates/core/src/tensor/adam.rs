use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of each listed parameter from its current
/// gradient. Gradients are left untouched.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], cfg: &AdamConfig) {
    for &id in ids {
        let p = store.get_mut(id);
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let values = p.value.data_mut().iter_mut();
        let grads = p.grad.data().iter();
        let m = p.first_moment.data_mut().iter_mut();
        let v = p.second_moment.data_mut().iter_mut();
        for (((w, &g), m), v) in values.zip(grads).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
