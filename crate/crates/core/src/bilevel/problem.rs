use crate::regularizers::{r1_value_and_grads, r2_value_and_grad, R2Sign, RegWeights};
use crate::tasks::{Dataset, ToyModel};

use super::{BiLevelError, Result};

/// Objective value with its partial gradients in the singular-vector block
/// (`d_vectors`) and the singular-value block (`d_values`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub value: f64,
    pub d_vectors: Vec<f64>,
    pub d_values: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.d_vectors.iter().all(|g| g.is_finite())
            && self.d_values.iter().all(|g| g.is_finite())
    }
}

/// A two-level objective over flat parameter blocks.
///
/// `vectors` is what the lower level trains, `values` what the upper level
/// trains. Batches are sample indices into the level's own dataset.
pub trait BiLevelProblem {
    /// Lower objective (training loss plus orthogonality penalty) on a
    /// lower-set batch.
    fn lower_grads(&self, vectors: &[f64], values: &[f64], batch: &[usize]) -> Result<Gradients>;

    /// Upper objective (validation loss plus entropy penalty) on an
    /// upper-set batch.
    fn upper_grads(&self, vectors: &[f64], values: &[f64], batch: &[usize]) -> Result<Gradients>;

    fn lower_len(&self) -> usize;
    fn upper_len(&self) -> usize;
}

/// [`BiLevelProblem`] for a [`ToyModel`] trained on a lower/upper split.
#[derive(Debug, Clone)]
pub struct AdapterProblem<'a> {
    template: ToyModel,
    lower: &'a Dataset,
    upper: Option<&'a Dataset>,
    weights: RegWeights,
    r2_sign: R2Sign,
}

impl<'a> AdapterProblem<'a> {
    pub fn new(template: ToyModel, lower: &'a Dataset, upper: &'a Dataset, weights: RegWeights, r2_sign: R2Sign) -> Self {
        Self {
            template,
            lower,
            upper: Some(upper).filter(|d| !d.is_empty()),
            weights,
            r2_sign,
        }
    }

    /// The template with the given parameters written in.
    pub fn model_at(&self, vectors: &[f64], values: &[f64]) -> Result<ToyModel> {
        let mut model = self.template.clone();
        model.set_vector_params(vectors)?;
        model.set_value_params(values)?;
        Ok(model)
    }

    fn batch(data: &Dataset, batch: &[usize]) -> Result<Dataset> {
        if batch.len() == data.len() && batch.iter().enumerate().all(|(i, b)| i == *b) {
            return Ok(data.clone());
        }
        Ok(data.select(batch, data.name())?)
    }
}

impl BiLevelProblem for AdapterProblem<'_> {
    fn lower_grads(&self, vectors: &[f64], values: &[f64], batch: &[usize]) -> Result<Gradients> {
        let model = self.model_at(vectors, values)?;
        let data = Self::batch(self.lower, batch)?;
        let (loss, grads) = model.loss_and_grads(&data)?;
        let (mut d_vectors, d_values) = ToyModel::flatten_grads(&grads);
        let mut value = loss;
        if self.weights.gamma1 > 0.0 {
            let (r1, r1_grads) = r1_value_and_grads(model.adapters());
            value += self.weights.gamma1 * r1;
            let flat: Vec<f64> = r1_grads
                .iter()
                .flat_map(|(dp, dq)| dp.data().iter().chain(dq.data()).copied())
                .collect();
            for (g, r) in d_vectors.iter_mut().zip(flat) {
                *g += self.weights.gamma1 * r;
            }
        }
        Ok(Gradients {
            value,
            d_vectors,
            d_values,
        })
    }

    fn upper_grads(&self, vectors: &[f64], values: &[f64], batch: &[usize]) -> Result<Gradients> {
        let upper = self.upper.ok_or(BiLevelError::EmptyDataset("upper-level"))?;
        let model = self.model_at(vectors, values)?;
        let data = Self::batch(upper, batch)?;
        let (loss, grads) = model.loss_and_grads(&data)?;
        let (d_vectors, mut d_values) = ToyModel::flatten_grads(&grads);
        let mut value = loss;
        if self.weights.gamma2 > 0.0 {
            let (r2, d_lambda) = r2_value_and_grad(&model.lambdas(), self.r2_sign)?;
            value += self.weights.gamma2 * r2;
            let mut offset = 0;
            for (adapter, dl) in model.adapters().iter().zip(&d_lambda) {
                let dv = crate::adapter::lambda_jacobian_vp(adapter.v(), adapter.mode(), dl)?;
                for (g, d) in d_values[offset..offset + dv.len()].iter_mut().zip(dv) {
                    *g += self.weights.gamma2 * d;
                }
                offset += adapter.rank();
            }
        }
        Ok(Gradients {
            value,
            d_vectors,
            d_values,
        })
    }

    fn lower_len(&self) -> usize {
        self.lower.len()
    }

    fn upper_len(&self) -> usize {
        self.upper.map_or(0, Dataset::len)
    }
}
