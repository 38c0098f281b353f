//! Small stacks of adapted linear layers used as stand-ins for a pretrained
//! network.

use std::str::FromStr;

use crate::adapter::{init_adapter, AdapterError, AdapterGrads, LoraAdapter, SingularMode, W0Init};
use crate::linalg::{LinalgError, Matrix, Rng};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: &Matrix) -> Matrix {
        match self {
            Self::Identity => x.clone(),
            Self::Tanh => x.map(f64::tanh).expect("tanh is bounded"),
        }
    }

    /// Multiplies `upstream` by the derivative, given the activation output.
    fn backprop(self, output: &Matrix, upstream: &Matrix) -> Result<Matrix, LinalgError> {
        match self {
            Self::Identity => Ok(upstream.clone()),
            Self::Tanh => upstream.hadamard(&output.map(|t| 1.0 - t * t)?),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" | "none" => Ok(Self::Identity),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation `{other}` (expected identity or tanh)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean over all output entries of the squared error.
    Mse,
    /// Mean over samples of the cross-entropy against one-hot targets.
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    /// Loss value and its gradient with respect to `prediction`.
    pub fn value_and_grad(self, prediction: &Matrix, target: &Matrix) -> Result<(f64, Matrix), LinalgError> {
        if prediction.shape() != target.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "loss",
                left: prediction.shape(),
                right: target.shape(),
            });
        }
        match self {
            Self::Mse => {
                let n = prediction.data().len().max(1) as f64;
                let diff = prediction.sub(target)?;
                let value = diff.frobenius_sq() / n;
                Ok((value, diff.scale(2.0 / n)?))
            }
            Self::SoftmaxCrossEntropy => {
                let (classes, batch) = prediction.shape();
                let mut grad = Matrix::zeros(classes, batch);
                let mut value = 0.0;
                for b in 0..batch {
                    let logits = prediction.column(b);
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                    for (c, logit) in logits.iter().enumerate() {
                        let log_p = logit - log_z;
                        let y = target.get(c, b);
                        value -= y * log_p;
                        grad.set(c, b, (log_p.exp() - y) / batch as f64);
                    }
                }
                let value = value / batch.max(1) as f64;
                if !value.is_finite() {
                    return Err(LinalgError::NonFinite("cross entropy"));
                }
                Ok((value, grad))
            }
        }
    }
}

impl FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(Self::Mse),
            "softmax_cross_entropy" | "cross_entropy" => Ok(Self::SoftmaxCrossEntropy),
            other => Err(format!("unknown loss `{other}` (expected mse or softmax_cross_entropy)")),
        }
    }
}

/// Shape and initialization of a [`ToyModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Layer widths, input first: `[d_in, hidden..., d_out]`.
    pub widths: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    pub mode: SingularMode,
    pub w0_init: W0Init,
    /// Applied after every layer except the last.
    pub activation: Activation,
    pub loss: LossKind,
}

/// A stack of adapted layers with a loss on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    adapters: Vec<LoraAdapter>,
    activations: Vec<Activation>,
    loss: LossKind,
}

impl ToyModel {
    pub fn new(adapters: Vec<LoraAdapter>, activations: Vec<Activation>, loss: LossKind) -> Result<Self, AdapterError> {
        if adapters.is_empty() || adapters.len() != activations.len() {
            return Err(AdapterError::InvalidDims(format!(
                "{} adapters with {} activations",
                adapters.len(),
                activations.len()
            )));
        }
        for pair in adapters.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(AdapterError::InvalidDims(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    pair[0].layer_index(),
                    pair[0].d_out(),
                    pair[1].layer_index(),
                    pair[1].d_in()
                )));
            }
        }
        let adapters = adapters.into_iter().enumerate().map(|(k, a)| a.with_layer_index(k)).collect();
        Ok(Self {
            adapters,
            activations,
            loss,
        })
    }

    pub fn build(rng: &mut Rng, spec: &ModelSpec) -> Result<Self, AdapterError> {
        if spec.widths.len() < 2 {
            return Err(AdapterError::InvalidDims("model needs at least input and output widths".into()));
        }
        let n_layers = spec.widths.len() - 1;
        let mut adapters = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let (d_in, d_out) = (spec.widths[k], spec.widths[k + 1]);
            let w0_init = match spec.w0_init {
                W0Init::Gaussian(scale) => W0Init::Gaussian(scale / (d_in as f64).sqrt()),
                W0Init::Zero => W0Init::Zero,
            };
            adapters.push(init_adapter(rng, d_out, d_in, spec.rank, spec.alpha, spec.mode, w0_init)?);
            activations.push(if k + 1 < n_layers { spec.activation } else { Activation::Identity });
        }
        Self::new(adapters, activations, spec.loss)
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn d_in(&self) -> usize {
        self.adapters[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.adapters.last().expect("non-empty").d_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, AdapterError> {
        let mut h = x.clone();
        for (a, act) in self.adapters.iter().zip(&self.activations) {
            h = act.apply(&a.forward(&h)?);
        }
        Ok(h)
    }

    pub fn loss(&self, data: &Dataset) -> Result<f64, AdapterError> {
        let out = self.forward(data.inputs())?;
        Ok(self.loss.value_and_grad(&out, data.targets())?.0)
    }

    /// Loss on `data` and exact gradients for every adapter.
    pub fn loss_and_grads(&self, data: &Dataset) -> Result<(f64, Vec<AdapterGrads>), AdapterError> {
        let mut inputs = Vec::with_capacity(self.adapters.len());
        let mut outputs = Vec::with_capacity(self.adapters.len());
        let mut h = data.inputs().clone();
        for (a, act) in self.adapters.iter().zip(&self.activations) {
            let out = act.apply(&a.forward(&h)?);
            inputs.push(std::mem::replace(&mut h, out.clone()));
            outputs.push(out);
        }
        let (value, mut upstream) = self.loss.value_and_grad(&h, data.targets())?;
        let mut grads = Vec::with_capacity(self.adapters.len());
        for k in (0..self.adapters.len()).rev() {
            let pre = self.activations[k].backprop(&outputs[k], &upstream)?;
            let (g, dx) = self.adapters[k].backward(&inputs[k], &pre)?;
            grads.push(g);
            upstream = dx;
        }
        grads.reverse();
        Ok((value, grads))
    }

    pub fn lambdas(&self) -> Vec<Vec<f64>> {
        self.adapters.iter().map(LoraAdapter::lambda).collect()
    }

    /// Number of singular-vector parameters (all `P` and `Q` entries).
    pub fn vector_param_len(&self) -> usize {
        self.adapters.iter().map(|a| a.p().data().len() + a.q().data().len()).sum()
    }

    pub fn value_param_len(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::rank).sum()
    }

    /// Singular-vector parameters flattened as `P_0, Q_0, P_1, Q_1, ...`.
    pub fn vector_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.vector_param_len());
        for a in &self.adapters {
            out.extend_from_slice(a.p().data());
            out.extend_from_slice(a.q().data());
        }
        out
    }

    pub fn set_vector_params(&mut self, values: &[f64]) -> Result<(), AdapterError> {
        if values.len() != self.vector_param_len() {
            return Err(AdapterError::LengthMismatch {
                expected: self.vector_param_len(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for a in &mut self.adapters {
            let np = a.p().data().len();
            let nq = a.q().data().len();
            a.set_p(&values[offset..offset + np])?;
            a.set_q(&values[offset + np..offset + np + nq])?;
            offset += np + nq;
        }
        Ok(())
    }

    /// Raw singular-value parameters `v_0, v_1, ...`.
    pub fn value_params(&self) -> Vec<f64> {
        self.adapters.iter().flat_map(|a| a.v().iter().copied()).collect()
    }

    pub fn set_value_params(&mut self, values: &[f64]) -> Result<(), AdapterError> {
        if values.len() != self.value_param_len() {
            return Err(AdapterError::LengthMismatch {
                expected: self.value_param_len(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for a in &mut self.adapters {
            let r = a.rank();
            a.set_v(&values[offset..offset + r])?;
            offset += r;
        }
        Ok(())
    }

    /// Flattens per-adapter gradients in the same order as the parameters.
    pub fn flatten_grads(grads: &[AdapterGrads]) -> (Vec<f64>, Vec<f64>) {
        let mut gv = Vec::new();
        let mut ge = Vec::new();
        for g in grads {
            gv.extend_from_slice(g.dp.data());
            gv.extend_from_slice(g.dq.data());
            ge.extend_from_slice(&g.dv);
        }
        (gv, ge)
    }

    /// Every frozen `W0`, for bit-identity checks.
    pub fn frozen_weights(&self) -> Vec<&Matrix> {
        self.adapters.iter().map(LoraAdapter::w0).collect()
    }
}
