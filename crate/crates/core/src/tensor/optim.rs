use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{precondition, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta_min: 2e-5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(precondition("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(precondition("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(precondition("weight_decay must be >= 0"));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.learning_rate) {
            return Err(precondition("eta_min must lie in [0, learning_rate]"));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at epoch 0 down to `eta_min` at `total`.
pub fn cosine_lr(base: f64, eta_min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch.min(total) as f64) / total as f64;
    eta_min + (base - eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    lr: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            lr: config.learning_rate,
            config,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Moves the learning rate along the cosine schedule; call once per epoch.
    pub fn set_epoch(&mut self, epoch: usize, total: usize) {
        self.lr = cosine_lr(self.config.learning_rate, self.config.eta_min, epoch, total);
    }

    /// Applies one update and clears gradients. Parameters must be passed in
    /// the same order on every call since velocity buffers are positional.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(precondition(format!("sgd_step: parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(precondition(format!(
                "sgd_step: optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad().expect("checked above").to_vec();
            if v.len() != g.len() {
                return Err(precondition("sgd_step: parameter size changed"));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                v[i] = momentum * v[i] + g[i] + weight_decay * data[i];
                data[i] -= self.lr * v[i];
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn param(v: f64) -> Tensor {
        Tensor::vector(vec![v]).into_param()
    }

    fn run(cfg: SgdConfig, start: f64, grads: &[f64]) -> f64 {
        let mut p = param(start);
        let mut opt = Sgd::new(cfg).unwrap();
        for &g in grads {
            p.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn vanilla_step() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            eta_min: 0.0,
        };
        assert_relative_eq!(run(cfg, 0.0, &[1.0]), -0.1, epsilon = 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            eta_min: 0.0,
        };
        assert_relative_eq!(run(cfg, 0.0, &[1.0, 1.0]), -0.29, epsilon = 1e-15);
    }

    #[test]
    fn decay_only() {
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
            eta_min: 0.0,
        };
        assert_relative_eq!(run(cfg, 1.0, &[0.0]), 0.95, epsilon = 1e-15);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = param(0.0);
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn grads_cleared_after_step() {
        let mut p = param(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.grad().is_none());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_relative_eq!(cosine_lr(1e-3, 2e-5, 0, 20), 1e-3);
        assert_relative_eq!(cosine_lr(1e-3, 2e-5, 20, 20), 2e-5);
        assert_relative_eq!(cosine_lr(1e-3, 2e-5, 10, 20), (1e-3 + 2e-5) / 2.0);
        let mut prev = f64::INFINITY;
        for e in 0..=20 {
            let lr = cosine_lr(1e-3, 2e-5, e, 20);
            assert!(lr <= prev && lr >= 2e-5);
            prev = lr;
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SgdConfig { momentum: 1.0, ..Default::default() },
            SgdConfig { weight_decay: -1.0, ..Default::default() },
            SgdConfig { learning_rate: 0.0, eta_min: 0.0, ..Default::default() },
            SgdConfig { eta_min: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(Sgd::new(cfg).is_err(), "{cfg:?}");
        }
    }
}
