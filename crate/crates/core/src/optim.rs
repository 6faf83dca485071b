//! AdamW with decoupled weight decay and a warm-up + cosine schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Step-indexed learning rate: linear ramp from 0 over `warmup` steps, then
/// cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.base_lr;
        }
        let frac = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moment buffers shaped like the parameters, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub schedule: LrSchedule,
    pub hyper: AdamWConfig,
}

impl OptimState {
    pub fn new(params: &ParamStore, schedule: LrSchedule, hyper: AdamWConfig) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            schedule,
            hyper,
        }
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }
}

/// One AdamW update of `params` in place. Returns the learning rate used.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamStore, opt: &mut OptimState) -> Result<f64> {
    if !params.same_structure(grads) || !params.same_structure(&opt.m) {
        return Err(Error::Argument("parameter, gradient and moment trees differ".into()));
    }
    let lr = opt.schedule.lr(opt.step);
    let AdamWConfig { beta1, beta2, eps, weight_decay } = opt.hyper;
    let t = (opt.step + 1) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let iter = params
        .iter_mut()
        .zip(grads.iter())
        .zip(opt.m.iter_mut().zip(opt.v.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            p[i] -= lr * (weight_decay * p[i] + update);
        }
    }
    opt.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { base_lr: 5e-4, warmup: 10, total: 100 };
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(10) - 5e-4).abs() < 1e-18);
        assert!((s.lr(5) - 2.5e-4).abs() < 1e-18);
        assert!(s.lr(100).abs() < 1e-18);
        for k in 10..100 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = single(0.7);
        let g = single(0.0);
        let sched = LrSchedule { base_lr: 0.1, warmup: 0, total: 10 };
        let hyper = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimState::new(&p, sched, hyper);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut opt).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn hand_computed_update() {
        let mut p = single(1.0);
        let g = single(0.5);
        let sched = LrSchedule { base_lr: 0.01, warmup: 0, total: 0 };
        let mut opt = OptimState::new(&p, sched, AdamWConfig::default());
        adamw_step(&mut p, &g, &mut opt).unwrap();
        // m̂ = 0.5, v̂ = 0.25, update = 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.01 * (0.05 * 1.0 + 0.5 / (0.5 + 1e-8));
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn tree_mismatch_rejected() {
        let mut p = single(1.0);
        let mut g = ParamStore::new();
        g.insert("x", Tensor::scalar(0.0));
        let mut opt = OptimState::new(&p, LrSchedule { base_lr: 0.1, warmup: 0, total: 1 }, AdamWConfig::default());
        assert!(adamw_step(&mut p, &g, &mut opt).is_err());
    }
}
