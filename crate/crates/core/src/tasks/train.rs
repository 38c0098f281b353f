//! End-to-end training runs: the single-level LoRA baseline and the
//! bi-level scheme, both producing a [`RunTrace`].

use thiserror::Error;

use crate::adapter::SingularMode;
use crate::bilevel::{
    clip_by_norm, global_step, AdapterProblem, Batcher, BiLevelConfig, BiLevelError, BiLevelState, OptimizerSpec,
    OptimizerState,
};
use crate::linalg::{Matrix, Rng};
use crate::regularizers::{R2Sign, RegWeights};
use crate::trace::{RunTrace, TraceRecord};

use super::{split_dataset, Dataset, SplitSpec, ToyModel};

/// A failed run together with everything recorded before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: BiLevelError,
    pub partial: RunTrace,
}

impl From<BiLevelError> for TrainFailure {
    fn from(error: BiLevelError) -> Self {
        Self {
            error,
            partial: RunTrace::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub model: ToyModel,
    /// Set when the split had to move one sample to keep the upper set non-empty.
    pub split_adjusted: bool,
}

/// How the baseline parameterizes its increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineForm {
    /// `P diag(v) Q` with `P`, `Q` and `v` trained jointly.
    #[default]
    PseudoSvd,
    /// Classic two-factor `P Q`: `v` pinned to ones and `P` zero-initialized.
    TwoFactor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub optimizer: OptimizerSpec,
    pub epochs: usize,
    /// 0 means full-batch.
    pub batch: usize,
    pub form: BaselineForm,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

fn snapshot_due(step: usize, last: usize, every: usize) -> bool {
    step == last || (every > 0 && step.is_multiple_of(every))
}

fn record(
    model: &ToyModel,
    train: &Dataset,
    test: &Dataset,
    step: usize,
    lower: Option<f64>,
    upper: Option<f64>,
    snapshot: bool,
) -> Result<TraceRecord, BiLevelError> {
    Ok(TraceRecord {
        step,
        lower_loss: lower,
        upper_loss: upper,
        train_loss: model.loss(train)?,
        test_loss: model.loss(test)?,
        defects: model.adapters().iter().map(|a| a.orthogonality_defect()).collect(),
        lambdas: snapshot.then(|| model.lambdas()),
    })
}

fn push(trace: &mut RunTrace, r: TraceRecord) -> Result<(), BiLevelError> {
    let step = r.step;
    trace.push(r).map_err(|e| BiLevelError::Divergence {
        step,
        what: e.to_string(),
    })
}

/// Single-level training of every adapter parameter on the whole train set.
pub fn train_lora_baseline(
    mut model: ToyModel,
    train: &Dataset,
    test: &Dataset,
    config: &BaselineConfig,
    snapshot_every: usize,
) -> Result<RunOutcome, TrainFailure> {
    if model.adapters().iter().any(|a| a.mode() != SingularMode::RealValue) {
        return Err(BiLevelError::InvalidConfig("the LoRA baseline needs real_value adapters".into()).into());
    }
    if config.form == BaselineForm::TwoFactor {
        model.set_value_params(&vec![1.0; model.value_param_len()]).map_err(BiLevelError::from)?;
        for a in model.adapters_mut() {
            let zeros = Matrix::zeros(a.p().rows(), a.p().cols());
            a.set_p(zeros.data()).map_err(BiLevelError::from)?;
        }
    }
    let mut trace = RunTrace::new();
    let result = (|| -> Result<(), BiLevelError> {
        let n_vec = model.vector_param_len();
        let train_values = config.form == BaselineForm::PseudoSvd;
        let mut params = model.vector_params();
        if train_values {
            params.extend(model.value_params());
        }
        let mut opt = OptimizerState::new(config.optimizer, params.len());
        let mut batches = Batcher::new(train.len(), config.batch, Rng::derived(config.seed, 0xBA5E).next_u64());
        let steps_per_epoch = train.len().div_ceil(batches.batch_size()).max(1);
        push(&mut trace, record(&model, train, test, 0, None, None, snapshot_due(0, config.epochs, snapshot_every))?)?;
        for epoch in 1..=config.epochs {
            let mut epoch_loss = 0.0;
            for _ in 0..steps_per_epoch {
                let batch = train.select(&batches.next_batch(), train.name())?;
                let (loss, grads) = model.loss_and_grads(&batch).map_err(|e| BiLevelError::from(e).at_step(epoch))?;
                let (mut g, ge) = ToyModel::flatten_grads(&grads);
                if train_values {
                    g.extend(ge);
                }
                if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                    return Err(BiLevelError::Divergence {
                        step: epoch,
                        what: "baseline loss or gradient".into(),
                    });
                }
                if let Some(c) = config.grad_clip {
                    clip_by_norm(&mut g, c);
                }
                opt.apply(&mut params, &g);
                model.set_vector_params(&params[..n_vec]).map_err(|e| BiLevelError::from(e).at_step(epoch))?;
                if train_values {
                    model.set_value_params(&params[n_vec..]).map_err(|e| BiLevelError::from(e).at_step(epoch))?;
                }
                epoch_loss += loss;
            }
            let r = record(
                &model,
                train,
                test,
                epoch,
                Some(epoch_loss / steps_per_epoch as f64),
                None,
                snapshot_due(epoch, config.epochs, snapshot_every),
            )
            .map_err(|e| e.at_step(epoch))?;
            push(&mut trace, r)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(RunOutcome {
            trace,
            model,
            split_adjusted: false,
        }),
        Err(error) => Err(TrainFailure { error, partial: trace }),
    }
}

/// Bi-level training: split `train`, then alternate lower and upper steps
/// for `config.global_steps` global steps.
pub fn train_bilora(
    model: ToyModel,
    train: &Dataset,
    test: &Dataset,
    split: SplitSpec,
    config: &BiLevelConfig,
    snapshot_every: usize,
) -> Result<RunOutcome, TrainFailure> {
    config.validate()?;
    let parts = split_dataset(train, split).map_err(BiLevelError::from)?;
    if parts.upper.is_empty() {
        return Err(BiLevelError::EmptyDataset("upper-level").into());
    }
    bilora_on_split(model, train, &parts.lower, &parts.upper, test, config, snapshot_every).map(|mut o| {
        o.split_adjusted = parts.adjusted;
        o
    })
}

/// Bi-level training on an explicit lower/upper pair. `train` is only used
/// for the full-train loss column of the trace.
pub fn bilora_on_split(
    mut model: ToyModel,
    train: &Dataset,
    lower: &Dataset,
    upper: &Dataset,
    test: &Dataset,
    config: &BiLevelConfig,
    snapshot_every: usize,
) -> Result<RunOutcome, TrainFailure> {
    config.validate()?;
    let weights = RegWeights::new(config.weights.gamma1, config.weights.gamma2).map_err(BiLevelError::from)?;
    let r2_sign: R2Sign = config.r2_sign;
    let problem = AdapterProblem::new(model.clone(), lower, upper, weights, r2_sign);
    let mut state = BiLevelState::new(&problem, model.vector_params(), model.value_params(), config)?;
    let mut trace = RunTrace::new();
    let last = config.global_steps;
    let result = (|| -> Result<(), BiLevelError> {
        push(&mut trace, record(&model, train, test, 0, None, None, snapshot_due(0, last, snapshot_every))?)?;
        for step in 1..=last {
            let metrics = global_step(&problem, &mut state, config, step)?;
            model.set_vector_params(&state.vectors).map_err(|e| BiLevelError::from(e).at_step(step))?;
            model.set_value_params(&state.values).map_err(|e| BiLevelError::from(e).at_step(step))?;
            let r = record(
                &model,
                train,
                test,
                step,
                Some(metrics.lower_loss),
                Some(metrics.upper_loss),
                snapshot_due(step, last, snapshot_every),
            )
            .map_err(|e| e.at_step(step))?;
            push(&mut trace, r)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(RunOutcome {
            trace,
            model,
            split_adjusted: false,
        }),
        Err(error) => Err(TrainFailure { error, partial: trace }),
    }
}
