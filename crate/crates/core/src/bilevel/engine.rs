use crate::linalg::Rng;

use super::hypergrad::{hypergradient, TapeStep, UnrollTape};
use super::optim::{clip_by_norm, OptimizerKind, OptimizerState};
use super::{BiLevelConfig, BiLevelError, BiLevelProblem, HypergradMode, Result};

/// Minibatches as sequential epochs over a seed-shuffled permutation,
/// reshuffled each epoch. A batch size of 0, or one at least the dataset
/// size, yields the whole dataset in its stored order every time.
#[derive(Debug, Clone, PartialEq)]
pub struct Batcher {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = if batch == 0 || batch >= n { n } else { batch };
        let mut b = Self {
            n,
            batch,
            order: (0..n).collect(),
            pos: 0,
            rng: Rng::new(seed),
        };
        if b.batch < n {
            b.rng.shuffle(&mut b.order);
        }
        b
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.batch == self.n {
            return self.order.clone();
        }
        if self.pos + self.batch > self.n {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Everything that evolves during a bi-level run.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLevelState {
    pub vectors: Vec<f64>,
    pub values: Vec<f64>,
    pub lower_opt: OptimizerState,
    pub upper_opt: OptimizerState,
    pub lower_batches: Batcher,
    pub upper_batches: Batcher,
}

impl BiLevelState {
    pub fn new<P: BiLevelProblem + ?Sized>(
        problem: &P,
        vectors: Vec<f64>,
        values: Vec<f64>,
        config: &BiLevelConfig,
    ) -> Result<Self> {
        config.validate()?;
        if problem.lower_len() == 0 {
            return Err(BiLevelError::EmptyDataset("lower-level"));
        }
        if problem.upper_len() == 0 {
            return Err(BiLevelError::EmptyDataset("upper-level"));
        }
        let mut seeds = Rng::derived(config.seed, 0xBA7C);
        Ok(Self {
            lower_opt: OptimizerState::new(config.lower, vectors.len()),
            upper_opt: OptimizerState::new(config.upper, values.len()),
            lower_batches: Batcher::new(problem.lower_len(), config.lower_batch, seeds.next_u64()),
            upper_batches: Batcher::new(problem.upper_len(), config.upper_batch, seeds.next_u64()),
            vectors,
            values,
        })
    }
}

/// One lower-level update of the singular vectors; the singular values are
/// only read. Returns the recorded step (state before the update).
pub fn lower_step<P: BiLevelProblem + ?Sized>(
    problem: &P,
    vectors: &mut [f64],
    values: &[f64],
    batch: &[usize],
    opt: &mut OptimizerState,
    grad_clip: Option<f64>,
) -> Result<TapeStep> {
    let mut g = problem.lower_grads(vectors, values, batch)?;
    if !g.is_finite() {
        return Err(BiLevelError::NonFinite("lower-level loss or gradient".into()));
    }
    let before = vectors.to_vec();
    if let Some(c) = grad_clip {
        clip_by_norm(&mut g.d_vectors, c);
    }
    opt.apply(vectors, &g.d_vectors);
    if vectors.iter().any(|x| !x.is_finite()) {
        return Err(BiLevelError::NonFinite("lower-level parameters".into()));
    }
    Ok(TapeStep {
        vectors_before: before,
        batch: batch.to_vec(),
        loss: g.value,
    })
}

/// One upper-level update of the singular values; the singular vectors stay
/// where the preceding lower steps left them. Returns the upper objective.
#[allow(clippy::too_many_arguments)]
pub fn upper_step<P: BiLevelProblem + ?Sized>(
    problem: &P,
    vectors: &[f64],
    values: &mut [f64],
    batch: &[usize],
    tape: &UnrollTape,
    mode: HypergradMode,
    opt: &mut OptimizerState,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let (loss, mut grad) = hypergradient(problem, tape, vectors, values, batch, mode)?;
    if let Some(c) = grad_clip {
        clip_by_norm(&mut grad, c);
    }
    opt.apply(values, &grad);
    if values.iter().any(|x| !x.is_finite()) {
        return Err(BiLevelError::NonFinite("upper-level parameters".into()));
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Lower objective before the last lower step of this global step.
    pub lower_loss: f64,
    /// Upper objective before the last upper step.
    pub upper_loss: f64,
}

/// `t1` lower steps on lower-set batches, then `t2` upper steps on upper-set
/// batches, each using the hypergradient through those `t1` steps.
pub fn global_step<P: BiLevelProblem + ?Sized>(
    problem: &P,
    state: &mut BiLevelState,
    config: &BiLevelConfig,
    step_index: usize,
) -> Result<StepMetrics> {
    let mut run = || -> Result<StepMetrics> {
        let mut tape = UnrollTape {
            steps: Vec::with_capacity(config.t1),
            sgd: match config.lower.kind {
                OptimizerKind::Sgd => Some((config.lower.lr, config.lower.weight_decay)),
                OptimizerKind::AdamW { .. } => None,
            },
        };
        let mut lower_loss = f64::NAN;
        for _ in 0..config.t1 {
            let batch = state.lower_batches.next_batch();
            let step = lower_step(
                problem,
                &mut state.vectors,
                &state.values,
                &batch,
                &mut state.lower_opt,
                config.grad_clip,
            )?;
            lower_loss = step.loss;
            tape.steps.push(step);
        }
        let mut upper_loss = f64::NAN;
        for _ in 0..config.t2 {
            let batch = state.upper_batches.next_batch();
            upper_loss = upper_step(
                problem,
                &state.vectors,
                &mut state.values,
                &batch,
                &tape,
                config.hypergrad,
                &mut state.upper_opt,
                config.grad_clip,
            )?;
        }
        Ok(StepMetrics { lower_loss, upper_loss })
    };
    run().map_err(|e| e.at_step(step_index))
}
