use serde::{Deserialize, Serialize};

use crate::backbone::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam over the tensors of a [`ParameterSet`] that currently track gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = (0..params.len()).map(|i| vec![0.0; params.tensor(i).numel()]).collect();
        Ok(Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients scaled by `grad_scale`, then clears
    /// them. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64, grad_scale: f64) -> Result<f64> {
        if !(lr >= 0.0) {
            return Err(Error::arg(format!("learning rate {lr} must be nonnegative")));
        }
        if self.m.len() != params.len() {
            return Err(Error::arg("optimizer built for another parameter set"));
        }
        let active: Vec<usize> = (0..params.len()).filter(|&i| params.tensor(i).requires_grad()).collect();
        let norm = active
            .iter()
            .flat_map(|&i| params.tensor(i).grad().unwrap_or_default())
            .map(|g| (g * grad_scale).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip {
            Some(c) if norm > c => grad_scale * c / norm,
            _ => grad_scale,
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in active {
            let t = params.tensor_mut(i);
            let g: Vec<f64> = t.grad().expect("active tensors track gradients").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                *x -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Group, Phase};

    fn filled(params: &mut ParameterSet, value: f64) {
        for i in 0..params.len() {
            let n = params.tensor(i).numel();
            if params.tensor(i).requires_grad() {
                params.tensor_mut(i).accumulate_grad(&vec![value; n]).unwrap();
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = ParameterSet::init(&BackboneConfig::tiny(), 1).unwrap();
        p.set_phase(Phase::Gist);
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        filled(&mut p, 0.3);
        opt.step(&mut p, 0.0, 1.0).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.tensor(i).data(), before.tensor(i).data());
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParameterSet::init(&BackboneConfig::tiny(), 1).unwrap();
        p.set_phase(Phase::Gist);
        let before = p.clone();
        let mut opt = Adam::new(
            &p,
            AdamConfig {
                clip: None,
                ..Default::default()
            },
        )
        .unwrap();
        filled(&mut p, 0.5);
        opt.step(&mut p, 0.01, 1.0).unwrap();
        for i in p.indices(Group::Trainable) {
            for (a, b) in p.tensor(i).data().iter().zip(before.tensor(i).data()) {
                // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
                assert!((b - a - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
            }
        }
        for i in p.indices(Group::Frozen) {
            assert_eq!(p.tensor(i).data(), before.tensor(i).data());
        }
        assert!(p.tensor(p.indices(Group::Trainable)[0]).grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut p = ParameterSet::init(&BackboneConfig::tiny(), 1).unwrap();
        p.set_phase(Phase::Gist);
        let mut opt = Adam::new(&p, AdamConfig::default()).unwrap();
        filled(&mut p, 10.0);
        let norm = opt.step(&mut p, 1e-3, 1.0).unwrap();
        let n = p.count(Group::Trainable) as f64;
        assert!((norm - 10.0 * n.sqrt()).abs() < 1e-6 * norm);
    }
}
