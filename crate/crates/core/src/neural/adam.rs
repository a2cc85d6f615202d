use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, ema_decay: 0.999 }
    }
}

/// Adam moments plus an exponential moving average of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    ema: Vec<f64>,
}

impl OptimizerState {
    /// The moving average starts as a copy of `initial`.
    pub fn new(config: AdamConfig, initial: &[f64]) -> Result<Self> {
        if !(config.lr.is_finite() && config.lr >= 0.0) {
            return invalid(format!("learning rate {} must be finite and non-negative", config.lr));
        }
        if !(0.0..=1.0).contains(&config.ema_decay) {
            return invalid(format!("EMA decay {} must lie in [0, 1]", config.ema_decay));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return invalid("Adam betas must lie in [0, 1) and eps must be positive");
        }
        let n = initial.len();
        Ok(Self { config, m: vec![0.0; n], v: vec![0.0; n], step: 0, ema: initial.to_vec() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ema(&self) -> &[f64] {
        &self.ema
    }

    pub fn set_ema(&mut self, ema: Vec<f64>) -> Result<()> {
        if ema.len() != self.ema.len() {
            return invalid("EMA length does not match the optimizer");
        }
        self.ema = ema;
        Ok(())
    }

    /// One bias-corrected Adam update followed by the EMA update.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid(format!(
                "optimizer holds {} parameters but got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        let bad = grads.iter().filter(|g| !g.is_finite()).count();
        if bad > 0 {
            let first = grads.iter().position(|g| !g.is_finite()).unwrap_or(0);
            return Err(Error::TrainingFailure(format!(
                "{bad} non-finite gradient entries at step {} (first at index {first}: {})",
                self.step + 1,
                grads[first]
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps, ema_decay } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[k] -= lr * mhat / (vhat.sqrt() + eps);
            self.ema[k] = ema_decay * self.ema[k] + (1.0 - ema_decay) * params[k];
        }
        if let Some(k) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::TrainingFailure(format!("parameter {k} became non-finite at step {}", self.step)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_moves_ema() {
        let mut opt = OptimizerState::new(AdamConfig::default(), &[0.0, 0.0]).unwrap();
        let mut p = vec![1.0, -2.0];
        opt.adam_step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert!((opt.ema()[0] - 0.001).abs() < 1e-15);
        assert!((opt.ema()[1] + 0.002).abs() < 1e-15);
    }

    #[test]
    fn ema_boundaries() {
        let init = [0.5, 0.25];
        let mut p = init.to_vec();
        let mut frozen = OptimizerState::new(AdamConfig { ema_decay: 1.0, ..AdamConfig::with_lr(0.1) }, &init).unwrap();
        let mut tracking = OptimizerState::new(AdamConfig { ema_decay: 0.0, ..AdamConfig::with_lr(0.1) }, &init).unwrap();
        let mut q = init.to_vec();
        for _ in 0..5 {
            frozen.adam_step(&mut p, &[1.0, -1.0]).unwrap();
            tracking.adam_step(&mut q, &[1.0, -1.0]).unwrap();
        }
        assert_eq!(frozen.ema(), &init);
        assert_eq!(tracking.ema(), q.as_slice());
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.05), &[0.0]).unwrap();
        let mut p = vec![0.0];
        for _ in 0..1000 {
            let g = 2.0 * (p[0] - 3.0);
            opt.adam_step(&mut p, &[g]).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-5), &[0.0]).unwrap();
        assert_eq!(opt.config.lr, 1e-5);
        let mut p = vec![0.0];
        opt.adam_step(&mut p, &[4.0]).unwrap();
        assert!((p[0] + 1e-5).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_fails() {
        let mut opt = OptimizerState::new(AdamConfig::default(), &[0.0, 0.0]).unwrap();
        let mut p = vec![0.0, 0.0];
        let err = opt.adam_step(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::TrainingFailure(ref m) if m.contains("index 1")));
        assert!(opt.adam_step(&mut p, &[0.0]).is_err());
    }
}
