use std::f64::consts::PI;

use clustr_core::numerics::{ParamStore, Real, Tensor};

use crate::config::OptimizerConfig;

/// Linear warmup, then cosine decay from `lr` to `min_lr` at the last step.
pub fn cosine_lr(cfg: &OptimizerConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let t = (step - cfg.warmup_steps.min(step)) as f64 / span as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (PI * t.min(1.0)).cos())
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// biases and layer-norm parameters are left alone.
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr_t = T::lit(lr);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.tensor.rank() >= 2 { T::lit(lr * self.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = p.grad.data();
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = *w - decay * *w - lr_t * update;
            }
        }
    }
}
