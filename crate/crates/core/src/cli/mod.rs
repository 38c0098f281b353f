//! The `bilora` command line: `run`, `sweep`, `gradcheck` and `histogram`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | invalid config, flags or input (missing key, unknown key, empty sweep values, traces without snapshots) |
//! | 3 | a run diverged; its partial trace and summary are still written |
//! | 4 | I/O failure |
//! | 5 | gradcheck tolerance breach |
//!
//! Output directory precedence: `--out`, then `run.out` from the config,
//! then the `BILORA_OUT` environment variable, then `bilora_out`.

pub mod config;
pub mod experiment;
pub mod histogram;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use crate::gradcheck::run_gradcheck;
use crate::trace::RunTrace;

pub use config::{ConfigError, ExperimentConfig, Method, RawConfig, KEYS};
pub use experiment::{execute_seed, median, prepare, run_seed, ExperimentSummary, RunSummary, SeedResult};
pub use histogram::{lambda_histogram, HistogramTable};

pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_TOLERANCE: i32 = 5;

pub const DEFAULT_OUT: &str = "bilora_out";
pub const OUT_ENV: &str = "BILORA_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("gradcheck tolerance breach in: {0}")]
    Tolerance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Invalid(_) => EXIT_INVALID,
            Self::Diverged(_) => EXIT_DIVERGED,
            Self::Io { .. } => EXIT_IO,
            Self::Tolerance(_) => EXIT_TOLERANCE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Parser)]
#[command(name = "bilora", version, about = "Bi-level training of pseudo-SVD low-rank adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Config file (flat `key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `run.seeds`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Worker threads for seeds and sweep cells (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration for every seed.
    Run(CommonArgs),
    /// Train the Cartesian product of one or more config axes.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// `key=v1,v2,...`, repeatable.
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
    },
    /// Finite-difference checks of every gradient on the configured shapes.
    Gradcheck(CommonArgs),
    /// Bin the final singular values stored in trace files.
    Histogram {
        /// Trace CSV files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        /// Output directory (falls back to `BILORA_OUT`, then `bilora_out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Required keys filled in when `gradcheck` runs without a config file.
const GRADCHECK_FALLBACK: &[(&str, &str)] = &[
    ("method", "bilora"),
    ("model.rank", "2"),
    ("model.mode", "softmax"),
    ("train.steps", "1"),
];

/// Reads the config file (if any) and applies `--seeds` and `--set`.
pub fn load_raw(args: &CommonArgs) -> Result<RawConfig, CliError> {
    let mut raw = match &args.config {
        Some(path) => RawConfig::parse(&fs::read_to_string(path).map_err(io_err(path))?)?,
        None => RawConfig::default(),
    };
    if let Some(seeds) = &args.seeds {
        raw.set("run.seeds", seeds)?;
    }
    for s in &args.set {
        raw.apply_override(s)?;
    }
    Ok(raw)
}

pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.and_then(|c| c.out.clone()))
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    if jobs == Some(0) {
        return Err(CliError::Invalid("--jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot build worker pool: {e}")))
}

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_seed{seed}.csv")
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const ECHO_FILE: &str = "config_echo.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Writes traces, `summary.json` and the config echo of one experiment.
fn write_experiment(dir: &Path, config: &ExperimentConfig, results: &[SeedResult]) -> Result<ExperimentSummary, CliError> {
    create_dir(dir)?;
    write_file(&dir.join(ECHO_FILE), &config.echo())?;
    for r in results {
        write_file(&dir.join(trace_file_name(r.summary.seed)), &r.trace.to_csv())?;
    }
    let summary = ExperimentSummary::new(config, results.iter().map(|r| r.summary.clone()).collect());
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), &(json + "\n"))?;
    Ok(summary)
}

fn divergence(results: &[SeedResult]) -> Option<String> {
    let failed: Vec<String> = results
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|e| format!("seed {}: {e}", r.summary.seed)))
        .collect();
    (!failed.is_empty()).then(|| failed.join("; "))
}

/// `run`: every seed of one configuration. Returns the output directory.
pub fn cmd_run(args: &CommonArgs) -> Result<PathBuf, CliError> {
    let config = load_raw(args)?.resolve()?;
    let out = resolve_out_dir(args.out.as_deref(), Some(&config));
    let results: Vec<SeedResult> =
        pool(args.jobs)?.install(|| config.seeds.par_iter().map(|&s| execute_seed(&config, s)).collect());
    let summary = write_experiment(&out, &config, &results)?;
    for r in &summary.runs {
        println!(
            "seed {}: {} final test {} best step {} gap at best {}",
            r.seed,
            r.status,
            fmt_opt(r.final_test_loss),
            r.best_step.map_or("-".into(), |s| s.to_string()),
            fmt_opt(r.gap_at_best)
        );
    }
    match divergence(&results) {
        Some(msg) => Err(CliError::Diverged(msg)),
        None => Ok(out),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{v:.6}"))
}

/// Parses `key=v1,v2,...`; the key must be known and the list non-empty.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("axis `{spec}` is not key=v1,v2,...")))?;
    let key = key.trim();
    if !KEYS.iter().any(|(k, _)| *k == key) {
        return Err(ConfigError::UnknownKey(key.to_string()).into());
    }
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Invalid(format!("axis `{key}` has no values")));
    }
    Ok((key.to_string(), values))
}

/// Cartesian product, first axis varying slowest.
pub fn sweep_cells(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (key, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell: Vec<(String, String)>| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

pub fn cell_dir_name(index: usize) -> String {
    format!("cell_{index:03}")
}

/// `sweep`: every cell and seed in one worker pool, then `sweep.csv` with
/// per-cell medians.
pub fn cmd_sweep(args: &CommonArgs, axes: &[String]) -> Result<PathBuf, CliError> {
    if axes.is_empty() {
        return Err(CliError::Invalid("sweep needs at least one --axis".into()));
    }
    let axes = axes.iter().map(|a| parse_axis(a)).collect::<Result<Vec<_>, _>>()?;
    let base = load_raw(args)?;
    let cells = sweep_cells(&axes);
    let configs = cells
        .iter()
        .map(|cell| {
            let mut raw = base.clone();
            for (k, v) in cell {
                raw.set(k, v)?;
            }
            Ok(raw.resolve()?)
        })
        .collect::<Result<Vec<ExperimentConfig>, CliError>>()?;
    let out = resolve_out_dir(args.out.as_deref(), configs.first());
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, SeedResult)> = pool(args.jobs)?
        .install(|| jobs.par_iter().map(|&(i, s)| (i, execute_seed(&configs[i], s))).collect());
    create_dir(&out)?;
    let mut csv = String::from("cell");
    for (k, _) in &axes {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push_str(",seeds,median_final_test_loss,median_gap_at_best,median_final_gap\n");
    let mut failures = Vec::new();
    for (i, (cell, config)) in cells.iter().zip(&configs).enumerate() {
        let cell_results: Vec<SeedResult> =
            results.iter().filter(|(c, _)| *c == i).map(|(_, r)| r.clone()).collect();
        let summary = write_experiment(&out.join(cell_dir_name(i)), config, &cell_results)?;
        if let Some(msg) = divergence(&cell_results) {
            failures.push(format!("{}: {msg}", cell_dir_name(i)));
        }
        let opt = |x: Option<f64>| x.map(crate::adapter::fmt_f64).unwrap_or_default();
        let mut row = vec![cell_dir_name(i)];
        row.extend(cell.iter().map(|(_, v)| v.clone()));
        row.push(config.seeds.len().to_string());
        row.push(opt(summary.median_final_test_loss));
        row.push(opt(summary.median_gap_at_best));
        row.push(opt(summary.median_final_gap));
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_file(&out.join(SWEEP_FILE), &csv)?;
    print!("{csv}");
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Diverged(failures.join("; ")))
    }
}

/// `gradcheck`: prints the report; a breach is an error naming the components.
pub fn cmd_gradcheck(args: &CommonArgs) -> Result<crate::gradcheck::GradcheckReport, CliError> {
    let mut raw = load_raw(args)?;
    for (k, v) in GRADCHECK_FALLBACK {
        if raw.get(k).is_none() {
            raw.set(k, v)?;
        }
    }
    let config = raw.resolve()?;
    let report = run_gradcheck(&config, config.seeds[0]).map_err(|e| CliError::Invalid(e.to_string()))?;
    print!("{report}");
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::Tolerance(report.failures().join(", ")))
    }
}

pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const LAMBDA_SUMS_FILE: &str = "lambda_sums.csv";

/// `histogram`: reads traces, writes `histogram.csv` and `lambda_sums.csv`.
pub fn cmd_histogram(traces: &[PathBuf], out: Option<&Path>) -> Result<HistogramTable, CliError> {
    let mut loaded = Vec::with_capacity(traces.len());
    for path in traces {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let trace = RunTrace::from_csv(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        loaded.push((path.display().to_string(), trace));
    }
    let table = lambda_histogram(&loaded).map_err(CliError::Invalid)?;
    let out = resolve_out_dir(out, None);
    create_dir(&out)?;
    write_file(&out.join(HISTOGRAM_FILE), &table.histogram_csv())?;
    write_file(&out.join(LAMBDA_SUMS_FILE), &table.sums_csv())?;
    print!("{}", table.histogram_csv());
    Ok(table)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&args).map(drop),
        Command::Sweep { common, axes } => cmd_sweep(&common, &axes).map(drop),
        Command::Gradcheck(args) => cmd_gradcheck(&args).map(drop),
        Command::Histogram { traces, out } => cmd_histogram(&traces, out.as_deref()).map(drop),
    }
}

/// Entry point of the binary: parses `std::env::args`, runs, returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_multiply() {
        let a = parse_axis("bilevel.t1=1,2,5").unwrap();
        let b = parse_axis("bilevel.t2 = 1, 3").unwrap();
        let cells = sweep_cells(&[a, b]);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec![("bilevel.t1".into(), "1".into()), ("bilevel.t2".into(), "1".into())]);
        assert_eq!(cells[5], vec![("bilevel.t1".into(), "5".into()), ("bilevel.t2".into(), "3".into())]);
        assert_eq!(parse_axis("bilevel.t1=").unwrap_err().exit_code(), EXIT_INVALID);
        assert_eq!(parse_axis("bilevel.t9=1").unwrap_err().exit_code(), EXIT_INVALID);
    }

    #[test]
    fn out_dir_precedence() {
        let c: ExperimentConfig = "method = bilora\nmodel.rank = 2\nmodel.mode = softmax\ntrain.steps = 1\nrun.out = from_config\n"
            .parse()
            .unwrap();
        assert_eq!(resolve_out_dir(Some(Path::new("flag")), Some(&c)), PathBuf::from("flag"));
        assert_eq!(resolve_out_dir(None, Some(&c)), PathBuf::from("from_config"));
    }
}
