//! Hypergradients through the lower-level unroll.
//!
//! With SGD lower steps `V_t = (1 - lr wd) V_{t-1} - lr dL1/dV(V_{t-1}, E)`,
//! the total derivative of the upper objective at `V_T` is accumulated by a
//! reverse sweep over the recorded steps:
//!
//! ```text
//! g_V <- dL2/dV(V_T, E)        g_E <- dL2/dE(V_T, E)
//! for t = T .. 1:
//!     g_E <- g_E - lr * (d2 L1 / dE dV)(V_{t-1}) g_V
//!     g_V <- (1 - lr wd) g_V - lr * (d2 L1 / dV2)(V_{t-1}) g_V
//! ```
//!
//! Both second-order products come from one central difference of the exact
//! first-order gradient of `L1` along `g_V`.

use super::{BiLevelError, BiLevelProblem, HypergradMode, Result};

/// One recorded lower-level step.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeStep {
    /// Singular-vector parameters before the step.
    pub vectors_before: Vec<f64>,
    /// Lower-set sample indices used by the step.
    pub batch: Vec<usize>,
    /// Lower objective at `vectors_before`.
    pub loss: f64,
}

/// The lower-level trajectory of one global step.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollTape {
    pub steps: Vec<TapeStep>,
    /// SGD learning rate and decoupled weight decay of the recorded steps.
    /// `None` when the lower optimizer was not SGD.
    pub sgd: Option<(f64, f64)>,
}

impl UnrollTape {
    pub fn empty() -> Self {
        Self {
            steps: Vec::new(),
            sgd: Some((0.0, 0.0)),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Re-runs the recorded SGD steps from the first snapshot.
    pub fn replay<P: BiLevelProblem + ?Sized>(&self, problem: &P, values: &[f64]) -> Result<Option<Vec<f64>>> {
        let Some((lr, wd)) = self.sgd else {
            return Err(BiLevelError::UnrollNeedsSgd);
        };
        let Some(first) = self.steps.first() else {
            return Ok(None);
        };
        let mut v = first.vectors_before.clone();
        for step in &self.steps {
            let g = problem.lower_grads(&v, values, &step.batch)?;
            for (p, d) in v.iter_mut().zip(&g.d_vectors) {
                *p = *p * (1.0 - lr * wd) - lr * d;
            }
        }
        Ok(Some(v))
    }
}

/// `1e-4 * (1 + max |params|)`.
pub fn default_hvp_step(params: &[f64]) -> f64 {
    1e-4 * (1.0 + params.iter().fold(0.0f64, |m, p| m.max(p.abs())))
}

/// Central-difference Hessian-vector product of the function whose gradient
/// is `grad`: `(grad(x + h d) - grad(x - h d)) / 2h`.
pub fn hvp<F>(grad: F, params: &[f64], direction: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(BiLevelError::InvalidConfig(format!("hvp step must be > 0, got {h}")));
    }
    if direction.len() != params.len() {
        return Err(BiLevelError::InvalidConfig("hvp direction length mismatch".into()));
    }
    let shifted = |sign: f64| -> Vec<f64> { params.iter().zip(direction).map(|(p, d)| p + sign * h * d).collect() };
    let plus = grad(&shifted(1.0))?;
    let minus = grad(&shifted(-1.0))?;
    let out: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(BiLevelError::NonFinite("Hessian-vector product".into()))
    }
}

/// Upper objective and its hypergradient with respect to the singular-value
/// parameters, evaluated at the tape's final vectors.
pub fn hypergradient<P: BiLevelProblem + ?Sized>(
    problem: &P,
    tape: &UnrollTape,
    final_vectors: &[f64],
    values: &[f64],
    upper_batch: &[usize],
    mode: HypergradMode,
) -> Result<(f64, Vec<f64>)> {
    let upper = problem.upper_grads(final_vectors, values, upper_batch)?;
    if !upper.is_finite() {
        return Err(BiLevelError::NonFinite("upper objective".into()));
    }
    if mode == HypergradMode::FirstOrder {
        return Ok((upper.value, upper.d_values));
    }
    let Some((lr, wd)) = tape.sgd else {
        return Err(BiLevelError::UnrollNeedsSgd);
    };
    let mut g_vectors = upper.d_vectors;
    let mut g_values = upper.d_values;
    let n_vec = g_vectors.len();
    for step in tape.steps.iter().rev() {
        if lr == 0.0 {
            break;
        }
        let norm = g_vectors.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        // Unit direction keeps the probe step independent of |g_V|.
        let direction: Vec<f64> = g_vectors.iter().map(|g| g / norm).collect();
        let h = default_hvp_step(&step.vectors_before);
        let joint = hvp(
            |v| {
                let g = problem.lower_grads(v, values, &step.batch)?;
                Ok(g.d_vectors.into_iter().chain(g.d_values).collect())
            },
            &step.vectors_before,
            &direction,
            h,
        )?;
        let (hv_vectors, hv_values) = joint.split_at(n_vec);
        for (ge, hv) in g_values.iter_mut().zip(hv_values) {
            *ge -= lr * norm * hv;
        }
        for (gv, hv) in g_vectors.iter_mut().zip(hv_vectors) {
            *gv = (1.0 - lr * wd) * *gv - lr * norm * hv;
        }
    }
    if g_values.iter().all(|g| g.is_finite()) {
        Ok((upper.value, g_values))
    } else {
        Err(BiLevelError::NonFinite("hypergradient".into()))
    }
}
