//! Orthogonality penalty on the singular-vector factors and the entropy
//! penalty that drives sigmoid-parameterized singular values to 0 or 1.

use std::str::FromStr;

use thiserror::Error;

use crate::adapter::LoraAdapter;
use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularizerError {
    #[error("entropy regularizer needs lambda in (0, 1); adapter {adapter}, index {index} has {value}")]
    OutOfUnitInterval { adapter: usize, index: usize, value: f64 },
    #[error("regularizer weights must be finite and non-negative, got gamma1={0}, gamma2={1}")]
    BadWeights(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl RegWeights {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self, RegularizerError> {
        let ok = |g: f64| g.is_finite() && g >= 0.0;
        if ok(gamma1) && ok(gamma2) {
            Ok(Self { gamma1, gamma2 })
        } else {
            Err(RegularizerError::BadWeights(gamma1, gamma2))
        }
    }

    pub fn zero() -> Self {
        Self { gamma1: 0.0, gamma2: 0.0 }
    }
}

/// Sign convention for the entropy penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum R2Sign {
    /// Positive binary entropy `H(lambda)`; minimizing pushes toward {0, 1}.
    #[default]
    Entropy,
    /// `lambda ln lambda + (1 - lambda) ln(1 - lambda) = -H(lambda)`,
    /// which is minimized at 0.5. Kept for comparison runs only.
    PaperLiteral,
}

impl R2Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::PaperLiteral => "paper_literal",
        }
    }

    fn factor(self) -> f64 {
        match self {
            Self::Entropy => 1.0,
            Self::PaperLiteral => -1.0,
        }
    }
}

impl FromStr for R2Sign {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "paper_literal" => Ok(Self::PaperLiteral),
            other => Err(format!("unknown r2_sign `{other}` (expected entropy or paper_literal)")),
        }
    }
}

/// Sum over adapters of `||P^T P - I||_F^2 + ||Q Q^T - I||_F^2`, with
/// `(dP, dQ) = (4 P (P^T P - I), 4 (Q Q^T - I) Q)` per adapter.
pub fn r1_value_and_grads(adapters: &[LoraAdapter]) -> (f64, Vec<(Matrix, Matrix)>) {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(adapters.len());
    for a in adapters {
        let eye = Matrix::identity(a.rank());
        let p_gap = a.p().transpose().matmul(a.p()).and_then(|g| g.sub(&eye)).expect("P^T P is r x r");
        let q_gap = a.q().matmul(&a.q().transpose()).and_then(|g| g.sub(&eye)).expect("Q Q^T is r x r");
        value += p_gap.frobenius_sq() + q_gap.frobenius_sq();
        let dp = a.p().matmul(&p_gap).and_then(|m| m.scale(4.0)).expect("finite R1 grad");
        let dq = q_gap.matmul(a.q()).and_then(|m| m.scale(4.0)).expect("finite R1 grad");
        grads.push((dp, dq));
    }
    (value, grads)
}

/// Binary entropy in nats.
pub fn binary_entropy(lambda: f64) -> f64 {
    -(lambda * lambda.ln() + (1.0 - lambda) * (1.0 - lambda).ln())
}

/// Entropy penalty summed over all values, with its gradient in lambda
/// (`dH/dlambda = ln((1 - lambda) / lambda)`), both scaled by `sign`.
pub fn r2_value_and_grad(
    lambdas: &[Vec<f64>],
    sign: R2Sign,
) -> Result<(f64, Vec<Vec<f64>>), RegularizerError> {
    let s = sign.factor();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(lambdas.len());
    for (k, lam) in lambdas.iter().enumerate() {
        let mut g = Vec::with_capacity(lam.len());
        for (i, &l) in lam.iter().enumerate() {
            if !(l > 0.0 && l < 1.0) {
                return Err(RegularizerError::OutOfUnitInterval {
                    adapter: k,
                    index: i,
                    value: l,
                });
            }
            value += s * binary_entropy(l);
            g.push(s * ((1.0 - l) / l).ln());
        }
        grads.push(g);
    }
    Ok((value, grads))
}
