//! Learning-rate schedule, global-norm clipping and AdamW.

use fusionlab_core::ParamStore;

use crate::config::OptimSettings;

/// Linear warmup from 0 to `base_lr`, then a half-cosine decay to 0 over
/// `cycle_steps`. Past the cycle the rate stays at 0.
pub fn lr_schedule(step: usize, cfg: &OptimSettings) -> f64 {
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        return base * step as f64 / cfg.warmup_steps as f64;
    }
    if cfg.cycle_steps == 0 {
        return base;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / cfg.cycle_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies only to tensors with two
/// or more dimensions, so biases, norms and scalar gates are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &OptimSettings) -> Self {
        let mut zeros = params.clone();
        for id in zeros.ids().collect::<Vec<_>>() {
            zeros.get_mut(id).values_mut().fill(0.0);
        }
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let decay = params.get(id).shape().len() >= 2;
            let m = self.m.get_mut(id).values_mut();
            let v = self.v.get_mut(id).values_mut();
            let p = params.get_mut(id).values_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if decay {
                    p[i] -= lr * self.weight_decay * p[i];
                }
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
