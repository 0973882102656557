//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::param::Param;

/// `base · ½ · (1 + cos(π · step / total))`, reaching 0 at `step == total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let s = step.min(total) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * s / total as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

/// Optimizer over an explicit parameter list; parameters not in the list are
/// never touched.
#[derive(Debug)]
pub struct AdamW {
    params: Vec<Param>,
    config: AdamWConfig,
    lr: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(params: Vec<Param>, config: AdamWConfig) -> Self {
        Self { params, lr: config.lr, config, state: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Moments>) -> Result<()> {
        for name in state.keys() {
            if !self.params.iter().any(|p| p.name() == name) {
                return Err(Error::Checkpoint(format!("optimizer state for unknown parameter {name}")));
            }
        }
        self.state = state;
        Ok(())
    }

    /// One update from `grads`. Parameters without a gradient are skipped,
    /// moments and decay included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for p in &self.params {
            let Some(g) = grads.get(p.var().as_tensor()) else { continue };
            let theta = p.value();
            let entry = match self.state.remove(p.name()) {
                Some(m) => m,
                None => Moments { m: theta.zeros_like()?, v: theta.zeros_like()?, steps: 0 },
            };
            let steps = entry.steps + 1;
            let m = ((entry.m * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((entry.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / (1.0 - c.beta1.powi(steps as i32)))?;
            let v_hat = (&v / (1.0 - c.beta2.powi(steps as i32)))?;
            let decayed = (&theta * (1.0 - self.lr * c.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let next = (decayed - (update * self.lr)?)?;
            p.set(&next)?;
            self.state.insert(p.name().to_string(), Moments { m, v, steps });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use candle_core::DType;

    use super::*;
    use crate::nn::param::{to_f64_vec, ParamGroup, ParamStore};
    use crate::repro::seed_all;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1e-3, 0, 500), 1e-3);
        assert!(cosine_lr(1e-3, 500, 500) <= 1e-9 * 1e-3);
        assert!((cosine_lr(1e-3, 250, 500) - 5e-4).abs() < 1e-15);
        for s in 0..500 {
            let expect = 0.001 * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / 500.0).cos());
            assert_eq!(cosine_lr(0.001, s, 500), expect);
        }
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let mut s = ParamStore::new(seed_all(0), DType::F64);
        let p = s.zeros("p", ParamGroup::Lora, (2,)).unwrap();
        p.set(&Tensor::new(&[1.0f64, -2.0], s.device()).unwrap()).unwrap();
        let loss = (p.tensor() * Tensor::new(&[3.0f64, 0.5], s.device()).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(vec![p.clone()], AdamWConfig::new(0.1, 0.01));
        opt.step(&grads).unwrap();
        // first step: m̂ = g, v̂ = g², update = g/(|g| + eps) ≈ sign(g)
        let out = to_f64_vec(&p.value()).unwrap();
        let e0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 3.0 / (3.0 + 1e-8);
        let e1 = -2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((out[0] - e0).abs() < 1e-12 && (out[1] - e1).abs() < 1e-12);
        assert_eq!(opt.state()["p"].steps, 1);
    }

    #[test]
    fn untouched_params_stay_bit_identical() {
        let mut s = ParamStore::new(seed_all(0), DType::F32);
        let frozen = s.normal("w", ParamGroup::Base, (4,), 1.0).unwrap();
        let live = s.normal("a", ParamGroup::Lora, (4,), 1.0).unwrap();
        let before = to_f64_vec(&frozen.value()).unwrap();
        let live_before = to_f64_vec(&live.value()).unwrap();
        let loss = (frozen.tensor() * live.tensor()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(s.trainable().cloned().collect(), AdamWConfig::new(1e-2, 0.01));
        opt.step(&grads).unwrap();
        assert_eq!(to_f64_vec(&frozen.value()).unwrap(), before);
        assert_ne!(to_f64_vec(&live.value()).unwrap(), live_before);
    }
}
