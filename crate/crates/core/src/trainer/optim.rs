use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// How the `decay` hyperparameter is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// Decoupled weight decay: `p ← p − lr·decay·p` each step.
    #[default]
    Weight,
    /// Per-epoch learning-rate schedule `lr / (1 + decay·epoch)`, no weight decay.
    Lr,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.08,
            decay_mode: DecayMode::Weight,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.decay < 0.0 {
            return Err(Error::Config("Adam eps must be > 0 and decay >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self.decay_mode {
            DecayMode::Weight => self.lr,
            DecayMode::Lr => self.lr / (1.0 + self.decay * epoch as f64),
        }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    /// Learning rate used by the next step.
    pub lr: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            lr: cfg.lr,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        Self::new(cfg, &params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update with optional decoupled weight decay.
///
/// `grads[i] = None` is a zero gradient. A non-finite gradient aborts with a
/// divergence error naming the parameter and the step, leaving every
/// parameter untouched.
pub fn adam_step(state: &mut AdamState, names: &[String], params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let step = state.t + 1;
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].len() {
                return Err(Error::dim("adam_step", format!("grad {:?} for param {:?}", g.shape(), params[i].shape())));
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::Divergence(format!("non-finite gradient in `{name}` at step {step}")));
            }
        }
    }
    state.t = step;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);
    let wd = match c.decay_mode {
        DecayMode::Weight => c.decay,
        DecayMode::Lr => 0.0,
    };
    let lr = state.lr;
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i].map(|g| g.data());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g[j]);
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + c.eps) + lr * wd * *x;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(decay: f64) -> AdamConfig {
        AdamConfig {
            decay,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(cfg(0.0), &[2]);
        let z = Tensor::zeros(&[2]);
        adam_step(&mut st, &[], &mut [&mut p], &[Some(&z)]).unwrap();
        adam_step(&mut st, &[], &mut [&mut p], &[None]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_about_lr() {
        for scale in [1e-6, 1.0, 1e6] {
            let mut p = Tensor::vector(vec![0.0, 0.0]);
            let mut st = AdamState::new(cfg(0.0), &[2]);
            let g = Tensor::vector(vec![scale, -scale]);
            adam_step(&mut st, &[], &mut [&mut p], &[Some(&g)]).unwrap();
            for v in p.data() {
                assert!(v.abs() <= 0.01 * (1.0 + 1e-6), "{v}");
                assert!(v.abs() > 0.009);
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut st = AdamState::new(cfg(0.0), &[1]);
        let g = Tensor::vector(vec![f64::NAN]);
        let e = adam_step(&mut st, &["decoder.out.bias".into()], &mut [&mut p], &[Some(&g)]).unwrap_err();
        assert!(matches!(e, Error::Divergence(_)));
        assert!(e.to_string().contains("decoder.out.bias") && e.to_string().contains("step 1"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn lr_schedule() {
        let c = AdamConfig {
            decay_mode: DecayMode::Lr,
            decay: 0.5,
            ..AdamConfig::default()
        };
        assert_eq!(c.lr_at_epoch(0), 0.01);
        assert_eq!(c.lr_at_epoch(2), 0.005);
    }
}
