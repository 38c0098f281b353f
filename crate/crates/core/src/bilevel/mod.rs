//! Bi-level training of adapters.
//!
//! The lower level fits the singular-vector factors (all `P`, `Q`) on one
//! data subset while the raw singular-value parameters stay fixed. The upper
//! level then fits the singular values on the other subset, using the
//! hypergradient through the lower level's unrolled SGD steps.
//!
//! Supported combinations:
//!
//! | lower optimizer | `FirstOrder` | `UnrolledExact` |
//! |-----------------|--------------|-----------------|
//! | SGD             | yes          | yes             |
//! | AdamW           | yes          | no (rejected)   |
//!
//! Any upper optimizer works with both modes.

mod engine;
mod hypergrad;
mod optim;
mod problem;

use std::str::FromStr;

use thiserror::Error;

use crate::adapter::AdapterError;
use crate::regularizers::{R2Sign, RegWeights, RegularizerError};
use crate::tasks::DatasetError;

pub use engine::{global_step, lower_step, upper_step, Batcher, BiLevelState, StepMetrics};
pub use hypergrad::{default_hvp_step, hvp, hypergradient, TapeStep, UnrollTape};
pub use optim::{clip_by_norm, OptimizerKind, OptimizerSpec, OptimizerState};
pub use problem::{AdapterProblem, BiLevelProblem, Gradients};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BiLevelError {
    #[error("training diverged at global step {step}: {what}")]
    Divergence { step: usize, what: String },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("UnrolledExact hypergradients need an SGD lower optimizer")]
    UnrollNeedsSgd,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl BiLevelError {
    /// Attaches a global step index to a non-finite error.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Self::NonFinite(what) => Self::Divergence { step, what },
            Self::Adapter(AdapterError::Linalg(e)) => Self::Divergence {
                step,
                what: e.to_string(),
            },
            other => other,
        }
    }
}

impl From<crate::linalg::LinalgError> for BiLevelError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        Self::Adapter(AdapterError::Linalg(e))
    }
}

pub type Result<T> = std::result::Result<T, BiLevelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HypergradMode {
    /// Reverse pass through the recorded lower-level SGD steps.
    UnrolledExact,
    /// Direct partial derivative only; ignores how the lower solution moves.
    FirstOrder,
}

impl HypergradMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UnrolledExact => "unrolled_exact",
            Self::FirstOrder => "first_order",
        }
    }
}

impl FromStr for HypergradMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "unrolled_exact" => Ok(Self::UnrolledExact),
            "first_order" => Ok(Self::FirstOrder),
            other => Err(format!("unknown hypergradient mode `{other}` (expected unrolled_exact or first_order)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLevelConfig {
    /// Lower-level steps per global step.
    pub t1: usize,
    /// Upper-level steps per global step.
    pub t2: usize,
    pub lower: OptimizerSpec,
    pub upper: OptimizerSpec,
    pub weights: RegWeights,
    pub r2_sign: R2Sign,
    pub hypergrad: HypergradMode,
    pub global_steps: usize,
    /// Minibatch sizes; 0 means the whole subset.
    pub lower_batch: usize,
    pub upper_batch: usize,
    /// Optional gradient-norm clipping applied before each optimizer update.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        Self {
            t1: 1,
            t2: 1,
            lower: OptimizerSpec::sgd(0.05),
            upper: OptimizerSpec::adamw(0.01, 0.0),
            weights: RegWeights::zero(),
            r2_sign: R2Sign::Entropy,
            hypergrad: HypergradMode::UnrolledExact,
            global_steps: 100,
            lower_batch: 0,
            upper_batch: 0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl BiLevelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BiLevelError::InvalidConfig(m));
        if self.t1 == 0 || self.t2 == 0 {
            return bad(format!("t1 and t2 must be >= 1 (got {}, {})", self.t1, self.t2));
        }
        if self.global_steps == 0 {
            return bad("global_steps must be >= 1".into());
        }
        for (name, o) in [("lower", &self.lower), ("upper", &self.upper)] {
            if !(o.lr.is_finite() && o.lr >= 0.0) || !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
                return bad(format!("{name} lr/weight_decay must be finite and >= 0"));
            }
        }
        RegWeights::new(self.weights.gamma1, self.weights.gamma2)?;
        if self.hypergrad == HypergradMode::UnrolledExact && self.lower.kind != OptimizerKind::Sgd {
            return Err(BiLevelError::UnrollNeedsSgd);
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
            if self.hypergrad == HypergradMode::UnrolledExact {
                return bad("grad_clip would make the unrolled hypergradient inexact; use first_order".into());
            }
        }
        Ok(())
    }
}
