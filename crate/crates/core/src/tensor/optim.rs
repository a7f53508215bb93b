use super::{ParamStore, Real};
use crate::error::{shape, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Per-parameter first/second moments and the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter using the
    /// gradients accumulated in `store`. Frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, cfg: &AdamConfig) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(shape(
                "adam_step",
                format!("state tracks {} parameters, store has {}", self.m.len(), store.len()),
            ));
        }
        if let Some(max) = cfg.clip_norm {
            clip_grad_norm(store, max);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            if m.len() != p.value.len() || v.len() != p.value.len() || p.grad.len() != p.value.len()
            {
                return Err(shape(
                    "adam_step",
                    format!("moment/grad size mismatch for `{}`", p.name),
                ));
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: T) -> T {
    let sq: T = store
        .iter()
        .filter(|p| p.requires_grad)
        .flat_map(|p| p.grad.data().iter())
        .map(|&g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut().filter(|p| p.requires_grad) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
