//! One experiment run per seed, and the summaries built from its trace.

use std::time::Instant;

use serde::Serialize;

use crate::bilevel::BiLevelError;
use crate::linalg::Rng;
use crate::tasks::{
    make_teacher_task, train_bilora, train_lora_baseline, Dataset, RunOutcome, SplitSpec, ToyModel, TrainFailure,
};
use crate::trace::RunTrace;

use super::config::{ExperimentConfig, Method};

/// Sub-stream ids of [`Rng::derived`] for one run seed.
const STREAM_TASK: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_BATCHES: u64 = 4;

/// Data and initial model of one seed. The model depends only on the seed
/// and the model spec, so `lora` and `bilora` runs share `P`, `Q` and `W0`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub model: ToyModel,
}

pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared, BiLevelError> {
    let (train, test) = make_teacher_task(&mut Rng::derived(seed, STREAM_TASK), &config.task)?;
    let model = ToyModel::build(&mut Rng::derived(seed, STREAM_MODEL), &config.model)?;
    Ok(Prepared { train, test, model })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome, TrainFailure> {
    let Prepared { train, test, model } = prepare(config, seed)?;
    let batch_seed = Rng::derived(seed, STREAM_BATCHES).next_u64();
    match config.method {
        Method::Lora => {
            let mut lora = config.lora.clone();
            lora.seed = batch_seed;
            train_lora_baseline(model, &train, &test, &lora, config.snapshot_every)
        }
        Method::Bilora => {
            let mut bilevel = config.bilevel.clone();
            bilevel.seed = batch_seed;
            let split = SplitSpec {
                lower_fraction: config.lower_fraction,
                seed: Rng::derived(seed, STREAM_SPLIT).next_u64(),
            };
            train_bilora(model, &train, &test, split, &bilevel, config.snapshot_every)
        }
    }
}

/// Per-seed entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub status: &'static str,
    pub error: Option<String>,
    pub records: usize,
    pub final_step: Option<usize>,
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
    pub final_gap: Option<f64>,
    pub best_step: Option<usize>,
    pub best_test_loss: Option<f64>,
    pub gap_at_best: Option<f64>,
    pub final_mean_defect: Option<f64>,
    pub split_adjusted: bool,
    pub wall_time_s: f64,
}

impl RunSummary {
    pub fn from_trace(seed: u64, trace: &RunTrace, error: Option<String>, split_adjusted: bool, wall: f64) -> Self {
        let last = trace.last();
        let best = trace.best_test();
        Self {
            seed,
            status: if error.is_some() { "diverged" } else { "ok" },
            error,
            records: trace.len(),
            final_step: last.map(|r| r.step),
            final_train_loss: last.map(|r| r.train_loss),
            final_test_loss: last.map(|r| r.test_loss),
            final_gap: last.map(|r| r.gap()),
            best_step: best.map(|r| r.step),
            best_test_loss: best.map(|r| r.test_loss),
            gap_at_best: best.map(|r| r.gap()),
            final_mean_defect: last
                .filter(|r| !r.defects.is_empty())
                .map(|r| r.defects.iter().sum::<f64>() / r.defects.len() as f64),
            split_adjusted,
            wall_time_s: wall,
        }
    }
}

/// A finished or failed seed together with its trace.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub trace: RunTrace,
    pub summary: RunSummary,
    pub failure: Option<BiLevelError>,
}

pub fn execute_seed(config: &ExperimentConfig, seed: u64) -> SeedResult {
    let start = Instant::now();
    let result = run_seed(config, seed);
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok(outcome) => SeedResult {
            summary: RunSummary::from_trace(seed, &outcome.trace, None, outcome.split_adjusted, wall),
            trace: outcome.trace,
            failure: None,
        },
        Err(TrainFailure { error, partial }) => SeedResult {
            summary: RunSummary::from_trace(seed, &partial, Some(error.to_string()), false, wall),
            trace: partial,
            failure: Some(error),
        },
    }
}

/// Median of the finite entries; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub method: &'static str,
    pub mode: &'static str,
    pub runs: Vec<RunSummary>,
    pub median_final_test_loss: Option<f64>,
    pub median_gap_at_best: Option<f64>,
    pub median_final_gap: Option<f64>,
}

impl ExperimentSummary {
    pub fn new(config: &ExperimentConfig, runs: Vec<RunSummary>) -> Self {
        let ok = || runs.iter().filter(|r| r.error.is_none());
        Self {
            method: config.method.as_str(),
            mode: config.model.mode.as_str(),
            median_final_test_loss: median(ok().filter_map(|r| r.final_test_loss)),
            median_gap_at_best: median(ok().filter_map(|r| r.gap_at_best)),
            median_final_gap: median(ok().filter_map(|r| r.final_gap)),
            runs,
        }
    }
}
