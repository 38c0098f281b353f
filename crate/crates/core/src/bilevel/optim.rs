//! First-order optimizers over flat parameter vectors.

use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        Self::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::AdamW { .. } => "adamw",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::adamw()),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adamw)")),
        }
    }
}

/// Hyperparameters for one level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` before the update.
    pub weight_decay: f64,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::adamw(),
            lr,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    step_count: u64,
    moments: Option<Moments>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, n_params: usize) -> Self {
        let moments = match spec.kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::AdamW { .. } => Some(Moments {
                first: vec![0.0; n_params],
                second: vec![0.0; n_params],
            }),
        };
        Self {
            spec,
            step_count: 0,
            moments,
        }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn has_moments(&self) -> bool {
        self.moments.is_some()
    }

    /// One update of `params` against `grads`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
        let OptimizerSpec { kind, lr, weight_decay } = self.spec;
        self.step_count += 1;
        let decay = 1.0 - lr * weight_decay;
        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p = *p * decay - lr * g;
                }
            }
            OptimizerKind::AdamW { .. } => adamw_apply(self, params, grads, decay),
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
fn adamw_apply(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], decay: f64) {
    let OptimizerKind::AdamW { beta1, beta2, eps } = state.spec.kind else {
        unreachable!("adamw_apply on a non-AdamW state");
    };
    let lr = state.spec.lr;
    let t = state.step_count as i32;
    let moments = state.moments.as_mut().expect("AdamW keeps moments");
    assert_eq!(moments.first.len(), params.len(), "moment buffer shape");
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        moments.first[i] = beta1 * moments.first[i] + (1.0 - beta1) * g;
        moments.second[i] = beta2 * moments.second[i] + (1.0 - beta2) * g * g;
        let m_hat = moments.first[i] / c1;
        let v_hat = moments.second[i] / c2;
        params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_by_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_quadratic_step() {
        // d/dp 0.5 (p - 3)^2 at p = 0 is -3.
        let mut state = OptimizerState::new(OptimizerSpec::sgd(0.1), 1);
        let mut p = [0.0];
        state.apply(&mut p, &[-3.0]);
        assert!((p[0] - 0.3).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
        assert!(!state.has_moments());
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut state = OptimizerState::new(OptimizerSpec::adamw(0.1, 0.0), 3);
        let mut p = [1.0, -2.0, 0.5];
        state.apply(&mut p, &[0.0; 3]);
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert!(state.has_moments());
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let lr = 0.01;
        let mut state = OptimizerState::new(OptimizerSpec::adamw(lr, 0.0), 3);
        let g = [2.0, -0.5, 1e-3];
        let mut p = [0.0; 3];
        state.apply(&mut p, &g);
        for (pi, gi) in p.iter().zip(g) {
            let want = -lr * gi / (gi.abs() + 1e-8);
            assert!((pi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let mut state = OptimizerState::new(OptimizerSpec::adamw(0.1, 0.5), 1);
        let mut p = [2.0];
        state.apply(&mut p, &[0.0]);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        let mut state = OptimizerState::new(OptimizerSpec::adamw(0.1, 0.0), 1);
        let mut p = [0.0];
        for _ in 0..100 {
            let g = p[0] - 1.0;
            state.apply(&mut p, &[g]);
        }
        assert!((p[0] - 1.0).abs() < 0.05, "p = {}", p[0]);
        assert_eq!(state.step_count(), 100);
    }

    #[test]
    fn clipping() {
        let mut g = [3.0, 4.0];
        clip_by_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = [0.1, 0.0];
        clip_by_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.0]);
    }
}
