//! Adaptive-moment optimizers with decoupled (AdamW) or coupled (Adam) weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{EntryKind, ParamGrads, ParameterSet};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Decay applied to the weights directly.
    Decoupled,
    /// Decay added to the gradient.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: DecayMode,
}

impl AdamConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: DecayMode::Decoupled,
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            decay: DecayMode::Coupled,
            ..Self::adamw(lr, weight_decay)
        }
    }
}

/// First and second moments aligned with a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = |p: &ParameterSet<T>| p.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn check_aligned(&self, params: &ParameterSet<T>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(shape_err!("optimizer state does not match the parameter set"));
        }
        for ((m, v), e) in self.m.iter().zip(&self.v).zip(params.entries()) {
            if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
                return Err(shape_err!("optimizer moments for {} have the wrong shape", e.name));
            }
        }
        Ok(())
    }

    /// One bias-corrected update of every unfrozen weight that has a gradient.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParamGrads<T>, cfg: &AdamConfig) -> Result<()> {
        self.check_aligned(params)?;
        if grads.entries.len() != params.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters",
                grads.entries.len(),
                params.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let lr = T::of(cfg.lr);
        let wd = T::of(cfg.weight_decay);
        let eps = T::of(cfg.eps);
        let step_size = T::of(cfg.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let shrink = T::one() - lr * wd;
        for (i, entry) in params.entries_mut().iter_mut().enumerate() {
            if entry.frozen || entry.kind != EntryKind::Weight {
                continue;
            }
            let Some(g) = &grads.entries[i] else { continue };
            if g.shape() != entry.value.shape() {
                return Err(shape_err!("gradient for {} has shape {:?}", entry.name, g.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &gi), mi), vi) in entry.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = match cfg.decay {
                    DecayMode::Coupled => gi + wd * *p,
                    DecayMode::Decoupled => gi,
                };
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                if cfg.decay == DecayMode::Decoupled {
                    *p = *p * shrink;
                }
                *p = *p - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(v), EntryKind::Weight).unwrap();
        p
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        ParamGrads {
            entries: vec![Some(Tensor::scalar(g))],
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut p = single(0.7);
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            s.step(&mut p, &grad(0.0), &AdamConfig::adamw(1e-3, 0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(1.0), &AdamConfig::adamw(0.01, 0.0)).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε)
        let want = -0.01 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(0.0), &AdamConfig::adamw(0.1, 0.01)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_acts_through_the_gradient() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(0.0), &AdamConfig::adam(0.1, 0.01)).unwrap();
        // the decay term becomes the whole gradient, so the normalized step is ≈ lr
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut p = single(1.0);
        p.set_frozen(true);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(1.0), &AdamConfig::adamw(0.1, 0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }
}
