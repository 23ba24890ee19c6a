//! Adam with global-norm clipping, linear warm-up and a reduce-on-plateau
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling.
    pub clip: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5e-3,
            warmup_steps: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: u32,
    pub factor: f64,
    /// Minimum decrease (dB) that counts as an improvement.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 3,
            factor: 0.6,
            threshold: 0.01,
        }
    }
}

/// Reduce-on-plateau state over a metric where lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub best: f64,
    pub bad_evals: u32,
    pub reductions: u32,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Self {
        PlateauScheduler {
            config,
            best: f64::INFINITY,
            bad_evals: 0,
            reductions: 0,
        }
    }

    /// Records one evaluation and returns the learning-rate multiplier to
    /// apply (1 or `factor`).
    pub fn observe(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite(format!("scheduler metric {metric}")));
        }
        if metric < self.best - self.config.threshold {
            self.best = metric;
            self.bad_evals = 0;
            return Ok(1.0);
        }
        self.bad_evals += 1;
        if self.bad_evals > self.config.patience {
            self.bad_evals = 0;
            self.reductions += 1;
            return Ok(self.config.factor);
        }
        Ok(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied { clipped: bool },
    /// Gradient contained NaN/inf; parameters and moments untouched.
    Skipped,
}

/// Full optimizer state; serializable for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: AdamConfig,
    /// Target learning rate after warm-up (decayed by the scheduler).
    pub lr: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub scheduler: PlateauScheduler,
    pub skipped_steps: u64,
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `g` in place so its global norm does not exceed `max_norm`.
/// Returns whether clipping happened.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> bool {
    let n = global_norm(g);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
        true
    } else {
        false
    }
}

impl Optimizer {
    pub fn new(n_params: usize, lr: f64, config: AdamConfig, plateau: PlateauConfig) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(config.clip > 0.0) {
            return Err(Error::Config(format!("clip threshold must be > 0, got {}", config.clip)));
        }
        Ok(Optimizer {
            config,
            lr,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            scheduler: PlateauScheduler::new(plateau),
            skipped_steps: 0,
        })
    }

    /// Learning rate used for update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.lr
        } else {
            self.lr * step as f64 / w as f64
        }
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step + 1)
    }

    /// Clips `grads` in place and applies one Adam update to `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "optimizer step",
                expected: self.m.len(),
                found: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped_steps += 1;
            return Ok(StepOutcome::Skipped);
        }
        let clipped = clip_global_norm(grads, self.config.clip);
        self.step += 1;
        let t = self.step as f64;
        let lr = self.lr_at(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(StepOutcome::Applied { clipped })
    }

    /// Feeds a validation metric to the plateau scheduler, decaying the
    /// target learning rate when it stalls. Returns true on a reduction.
    pub fn observe_validation(&mut self, metric: f64) -> Result<bool> {
        let f = self.scheduler.observe(metric)?;
        if f != 1.0 {
            self.lr *= f;
            return Ok(true);
        }
        Ok(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(n: usize) -> Optimizer {
        Optimizer::new(n, 1e-3, AdamConfig::default(), PlateauConfig::default()).unwrap()
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut o = opt(4);
        let mut p = vec![1.0, -2.0, 3.0, 0.5];
        let before = p.clone();
        let mut g = vec![0.0; 4];
        for _ in 0..10 {
            o.step(&mut p, &mut g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![3.0, 4.0];
        let thr = 0.5;
        // norm 5 = 10× threshold
        assert!(clip_global_norm(&mut g, thr));
        assert!((global_norm(&g) - thr).abs() < 1e-15);
        assert!((g[0] / g[1] - 0.75).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        assert!(!clip_global_norm(&mut small, thr));
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn warmup_is_linear() {
        let o = opt(1);
        assert_eq!(o.lr_at(250), 0.5 * 1e-3);
        assert_eq!(o.lr_at(500), 1e-3);
        assert_eq!(o.lr_at(5000), 1e-3);
        assert!(o.lr_at(1) > 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first Adam update is lr·g/(|g|+eps).
        let cfg = AdamConfig {
            warmup_steps: 0,
            clip: 1e9,
            ..AdamConfig::default()
        };
        let mut o = Optimizer::new(2, 0.1, cfg, PlateauConfig::default()).unwrap();
        let mut p = vec![0.0, 0.0];
        let mut g = vec![2.0, -0.5];
        o.step(&mut p, &mut g).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
        assert!((p[1] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut o = opt(2);
        let mut p = vec![1.0, 1.0];
        let mut g = vec![f64::NAN, 1.0];
        assert_eq!(o.step(&mut p, &mut g).unwrap(), StepOutcome::Skipped);
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(o.step, 0);
        assert_eq!(o.skipped_steps, 1);
    }

    #[test]
    fn scheduler_patience() {
        let mut o = opt(1);
        for m in [-1.0, -2.0, -3.0, -4.0, -5.0] {
            assert!(!o.observe_validation(m).unwrap());
        }
        assert_eq!(o.lr, 1e-3);
        // Three stale evaluations are tolerated, the fourth decays.
        for _ in 0..3 {
            assert!(!o.observe_validation(-5.0).unwrap());
        }
        assert!(o.observe_validation(-5.005).unwrap());
        assert!((o.lr - 6e-4).abs() < 1e-18);
        let mut lr = o.lr;
        for i in 0..40 {
            o.observe_validation(if i % 7 == 0 { -100.0 - i as f64 } else { 0.0 }).unwrap();
            assert!(o.lr <= lr);
            lr = o.lr;
        }
        assert!(o.observe_validation(f64::NAN).is_err());
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamConfig {
            warmup_steps: 10,
            clip: 100.0,
            ..AdamConfig::default()
        };
        let mut o = Optimizer::new(3, 0.05, cfg, PlateauConfig::default()).unwrap();
        let target = [1.0, -2.0, 0.5];
        let mut p = vec![0.0; 3];
        for _ in 0..2000 {
            let mut g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            o.step(&mut p, &mut g).unwrap();
        }
        for (x, t) in p.iter().zip(&target) {
            assert!((x - t).abs() < 1e-3);
        }
    }
}
