//! Momentum SGD with optional gradient dropout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the accumulator `g` absorbs a new gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentumRule {
    /// `g ← g + μ·grad`, no decay of the accumulator. Token `paper`.
    #[default]
    Additive,
    /// `g ← μ·g + grad`
    Conventional,
}

impl fmt::Display for MomentumRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MomentumRule::Additive => "paper",
            MomentumRule::Conventional => "conventional",
        })
    }
}

impl FromStr for MomentumRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(MomentumRule::Additive),
            "conventional" => Ok(MomentumRule::Conventional),
            other => Err(Error::Config(format!("unknown momentum rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Probability that a weight receives its update this step; `None`
    /// disables the mask entirely.
    pub grad_dropout: Option<f64>,
    pub batch_per_class: usize,
    pub iters: usize,
    pub aug_per_sample: usize,
    pub aug_scale: f64,
    pub seed: u64,
    pub momentum_rule: MomentumRule,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            grad_dropout: None,
            batch_per_class: 16,
            iters: 2000,
            aug_per_sample: 100,
            aug_scale: 0.1,
            seed: 0,
            momentum_rule: MomentumRule::Additive,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_GRAD_DROPOUT_P: f64 = 0.5;

    /// Settings for training a network from scratch on full data.
    pub fn base() -> Self {
        Self {
            lr: 0.05,
            momentum_rule: MomentumRule::Conventional,
            aug_per_sample: 0,
            iters: 1500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(p) = self.grad_dropout {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config("gradient dropout p must lie in (0, 1]".into()));
            }
        }
        if self.batch_per_class == 0 {
            return Err(Error::Config("batch_per_class must be >= 1".into()));
        }
        if !(self.aug_scale >= 0.0 && self.aug_scale.is_finite()) {
            return Err(Error::Config("augmentation scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub accumulator: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            accumulator: vec![F::zero(); len],
            step: 0,
        }
    }
}

/// One update with an explicit mask (`None` = every entry updated).
pub fn sgd_step_with_mask<F: Scalar>(
    params: &mut [F],
    state: &mut OptimizerState<F>,
    grad: &[F],
    mask: Option<&[bool]>,
    cfg: &TrainConfig,
) {
    assert_eq!(params.len(), grad.len(), "parameter/gradient length");
    assert_eq!(params.len(), state.accumulator.len(), "parameter/state length");
    let mu = F::of(cfg.momentum);
    let lr = F::of(cfg.lr);
    for (g, &d) in state.accumulator.iter_mut().zip(grad) {
        *g = match cfg.momentum_rule {
            MomentumRule::Additive => *g + mu * d,
            MomentumRule::Conventional => mu * *g + d,
        };
    }
    match mask {
        Some(mask) => {
            assert_eq!(mask.len(), params.len(), "mask length");
            for ((w, &g), &keep) in params.iter_mut().zip(&state.accumulator).zip(mask) {
                if keep {
                    *w = *w - lr * g;
                }
            }
        }
        None => {
            for (w, &g) in params.iter_mut().zip(&state.accumulator) {
                *w = *w - lr * g;
            }
        }
    }
    state.step += 1;
}

/// One update; draws a fresh per-entry Bernoulli(p) mask from `rng` when
/// gradient dropout is enabled and leaves `rng` untouched otherwise.
pub fn sgd_step<F: Scalar, R: Rng + ?Sized>(
    params: &mut [F],
    state: &mut OptimizerState<F>,
    grad: &[F],
    cfg: &TrainConfig,
    rng: &mut R,
) {
    match cfg.grad_dropout {
        Some(p) => {
            let mask: Vec<bool> = (0..params.len()).map(|_| rng.random_bool(p)).collect();
            sgd_step_with_mask(params, state, grad, Some(&mask), cfg);
        }
        None => sgd_step_with_mask(params, state, grad, None, cfg),
    }
}
