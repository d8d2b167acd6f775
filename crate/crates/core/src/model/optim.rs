use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::numerical;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize) -> Self {
        OptimizerConfig {
            lr,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs,
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        // Triplet and AP batches need both polarities.
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        Ok(())
    }
}

/// Cosine annealing without restarts and with a zero floor:
/// `½·lr₀·(1 + cos(π·t/T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(invalid(format!("cosine_lr step {t} outside [0, {total}]")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Heavy-ball SGD: `v ← μv + (g + λw)`, `w ← w − η·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn from_config(len: usize, cfg: &OptimizerConfig) -> Self {
        Self::new(len, cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(invalid("optimizer state, parameters and gradients differ in length"));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(numerical(format!("non-finite gradient at parameter {i}")));
        }
        for ((w, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + (g + self.weight_decay * *w);
            *w -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-17);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-17);
        assert!(cosine_lr(11, 10, 0.1).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let lrs: Vec<f64> = (0..=20).map(|t| cosine_lr(t, 20, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plain_gradient_step() {
        // f(w) = ½w², no momentum or decay: w ← 1 − 0.1·1.
        let mut opt = SgdMomentum::new(1, 0.0, 0.0);
        let mut w = [1.0];
        let g = [w[0]];
        opt.step(&mut w, &g, 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut opt = SgdMomentum::new(2, 0.9, 5e-4);
        let mut w = [2.0, -4.0];
        opt.step(&mut w, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(w, [2.0 - 0.1 * 5e-4 * 2.0, -4.0 + 0.1 * 5e-4 * 4.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = SgdMomentum::new(1, 0.9, 0.0);
        let mut w = [0.0];
        opt.step(&mut w, &[1.0], 1.0).unwrap();
        opt.step(&mut w, &[1.0], 1.0).unwrap();
        assert_eq!(opt.velocity(), &[1.9]);
        assert!((w[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonfinite_gradients() {
        let mut opt = SgdMomentum::new(1, 0.9, 0.0);
        assert!(opt.step(&mut [0.0], &[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::new(0.1, 5, 2).validate().is_ok());
        assert!(OptimizerConfig::new(0.0, 5, 2).validate().is_err());
        assert!(OptimizerConfig::new(0.1, 0, 2).validate().is_err());
        assert!(OptimizerConfig::new(0.1, 5, 1).validate().is_err());
    }
}
