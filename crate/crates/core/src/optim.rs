//! AdamW with decoupled weight decay, and the learning-rate schedules used by
//! both training stages.
//!
//! ```text
//! θ ← θ − lr·λ·θ
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and the step counter for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let m: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One AdamW update of every trainable parameter that has a gradient.
    ///
    /// Gradients are validated before anything is written, so a non-finite
    /// gradient leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Range(format!("learning rate {lr} must be finite and >= 0")));
        }
        if self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::Dimension(format!(
                    "moment buffer {:?} does not match parameter `{}` {:?}",
                    m.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::numeric(format!("non-finite gradient for `{}`", p.name)));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] -= lr * weight_decay * theta[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                theta[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    WarmupCosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub initial_lr: f64,
    pub mode: ScheduleMode,
}

impl Default for ScheduleConfig {
    /// The stage-1 schedule.
    fn default() -> Self {
        Self {
            base_lr: 3e-3,
            warmup_steps: 500,
            total_steps: 5000,
            initial_lr: 1e-8,
            mode: ScheduleMode::WarmupCosine,
        }
    }
}

impl ScheduleConfig {
    pub fn constant(lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr: lr,
            warmup_steps: 0,
            total_steps,
            initial_lr: 0.0,
            mode: ScheduleMode::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Range(format!("base_lr {} must be >= 0", self.base_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Range("total_steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Range(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr <= self.base_lr) {
            return Err(Error::Range(format!(
                "initial_lr {} must lie in [0, base_lr]",
                self.initial_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warm-up from `initial_lr` to
    /// `base_lr`, then cosine decay reaching 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        Ok(match self.mode {
            ScheduleMode::Constant => self.base_lr,
            ScheduleMode::WarmupCosine => {
                if step < self.warmup_steps {
                    let f = step as f64 / self.warmup_steps as f64;
                    self.initial_lr + (self.base_lr - self.initial_lr) * f
                } else if self.total_steps == self.warmup_steps {
                    self.base_lr
                } else {
                    let progress = (step - self.warmup_steps) as f64
                        / (self.total_steps - self.warmup_steps) as f64;
                    self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut set = ParamSet::new();
        let id = set.add("theta", Tensor::scalar(value));
        set.get_mut(id).grad = Some(Tensor::scalar(grad));
        set
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut set = single(0.75, 0.0);
        let mut st = OptimizerState::new(cfg, &set);
        st.step(&mut set, 1e-3).unwrap();
        assert_eq!(set.iter().next().unwrap().value.item(), 0.75);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Oracle written out independently of the loop above.
        let (theta0, g, lr, wd) = (0.5_f64, 0.2_f64, 0.01_f64, 0.1_f64);
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8_f64);
        let decayed = theta0 - lr * wd * theta0;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = decayed - lr * m_hat / (v_hat.sqrt() + eps);

        let cfg = AdamWConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        };
        let mut set = single(theta0, g);
        let mut st = OptimizerState::new(cfg, &set);
        st.step(&mut set, lr).unwrap();
        assert_eq!(set.iter().next().unwrap().value.item().to_bits(), expected.to_bits());
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_lambda_theta() {
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut set = single(2.0, 0.0);
        let mut st = OptimizerState::new(cfg, &set);
        st.step(&mut set, 0.1).unwrap();
        let got = set.iter().next().unwrap().value.item();
        assert!((got - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut set = single(1.0, f64::NAN);
        let mut st = OptimizerState::new(AdamWConfig::default(), &set);
        assert!(matches!(st.step(&mut set, 0.1), Err(Error::Numeric { .. })));
        assert_eq!(set.iter().next().unwrap().value.item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = ScheduleConfig {
            base_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1100,
            initial_lr: 1e-8,
            mode: ScheduleMode::WarmupCosine,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_at(0).unwrap(), 1e-8);
        assert_eq!(cfg.lr_at(100).unwrap(), 1e-3);
        assert!((cfg.lr_at(600).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(1100).unwrap().abs() < 1e-18);
        assert!(matches!(cfg.lr_at(1101), Err(Error::Range(_))));
        let c = ScheduleConfig::constant(5e-5, 10);
        assert!((0..=10).all(|s| c.lr_at(s).unwrap() == 5e-5));
    }

    #[test]
    fn schedule_rejects_bad_configs() {
        let mut cfg = ScheduleConfig::constant(1e-3, 10);
        cfg.warmup_steps = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = ScheduleConfig::constant(1e-3, 10);
        cfg.initial_lr = 1.0;
        assert!(cfg.validate().is_err());
    }
}
