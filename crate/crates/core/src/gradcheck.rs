//! Finite-difference checks of every analytic gradient in the crate.
//!
//! Errors are relative, `|a - b| / max(|a|, |b|, 1e-3)`, so components
//! smaller than 1e-3 are held to an absolute bound instead.

use std::fmt;

use crate::adapter::{init_adapter, LoraAdapter, SingularMode, W0Init};
use crate::bilevel::{
    hypergradient, lower_step, AdapterProblem, Batcher, BiLevelError, BiLevelProblem, HypergradMode, OptimizerSpec,
    OptimizerState, UnrollTape,
};
use crate::cli::config::{ExperimentConfig, FaultInjection};
use crate::linalg::{gaussian_matrix, Matrix, Rng};
use crate::regularizers::{r1_value_and_grads, r2_value_and_grad, R2Sign};
use crate::tasks::{Dataset, ModelSpec, ToyModel};

/// Step for first-order checks.
pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-6;
/// Step and tolerance for the whole-unroll check.
pub const HYPER_FD_STEP: f64 = 1e-4;
pub const HYPER_TOL: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub component: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub evaluated: usize,
    /// Reported but never a failure (the first-order approximation gap).
    pub informational: bool,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.informational || self.max_rel_err <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed()).map(|r| r.component).collect()
    }

    pub fn get(&self, component: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.component == component)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>12} {:>10} {:>8}  status", "component", "max_rel_err", "tolerance", "checked")?;
        for r in &self.results {
            let status = match (r.informational, r.passed()) {
                (true, _) => "approximation gap",
                (false, true) => "ok",
                (false, false) => "FAIL",
            };
            writeln!(
                f,
                "{:<18} {:>12.3e} {:>10.0e} {:>8}  {status}",
                r.component, r.max_rel_err, r.tolerance, r.evaluated
            )?;
        }
        Ok(())
    }
}

fn random_adapter(rng: &mut Rng, mode: SingularMode) -> Result<(LoraAdapter, usize), BiLevelError> {
    let d_in = 1 + rng.below(6);
    let d_out = 1 + rng.below(6);
    let r = 1 + rng.below(d_in.min(d_out).min(4));
    let n = 1 + rng.below(4);
    let alpha = 1.0 + rng.next_f64() * 3.0;
    let mut a = init_adapter(rng, d_out, d_in, r, alpha, mode, W0Init::Gaussian(0.5))?;
    let v: Vec<f64> = (0..r).map(|_| 0.5 * rng.standard_normal()).collect();
    a.set_v(&v)?;
    Ok((a, n))
}

fn adapter_suite(rng: &mut Rng, trials: usize, fault: FaultInjection) -> Result<CheckResult, BiLevelError> {
    let mut worst = 0.0f64;
    let mut evaluated = 0;
    for t in 0..trials {
        let mode = SingularMode::ALL[t % 3];
        let (a, n) = random_adapter(rng, mode)?;
        let x = gaussian_matrix(rng, a.d_in(), n, 1.0)?;
        let up = gaussian_matrix(rng, a.d_out(), n, 1.0)?;
        let (mut g, dx) = a.backward(&x, &up)?;
        if fault == FaultInjection::AdapterSign {
            g.dv.iter_mut().for_each(|d| *d = -*d);
        }
        let probe = |a: &LoraAdapter, x: &Matrix| -> f64 {
            a.forward(x).map(|y| y.hadamard(&up).map(|m| m.data().iter().sum()).unwrap_or(f64::NAN)).unwrap_or(f64::NAN)
        };
        let fd_p = central_difference(
            |p| {
                let mut b = a.clone();
                b.set_p(p).map_or(f64::NAN, |_| probe(&b, &x))
            },
            a.p().data(),
            FD_STEP,
        );
        let fd_q = central_difference(
            |q| {
                let mut b = a.clone();
                b.set_q(q).map_or(f64::NAN, |_| probe(&b, &x))
            },
            a.q().data(),
            FD_STEP,
        );
        let fd_v = central_difference(
            |v| {
                let mut b = a.clone();
                b.set_v(v).map_or(f64::NAN, |_| probe(&b, &x))
            },
            a.v(),
            FD_STEP,
        );
        let fd_x = central_difference(
            |xs| Matrix::new(x.rows(), x.cols(), xs.to_vec()).map_or(f64::NAN, |xm| probe(&a, &xm)),
            x.data(),
            FD_STEP,
        );
        for (an, fd) in [(g.dp.data(), &fd_p), (g.dq.data(), &fd_q), (&g.dv[..], &fd_v), (dx.data(), &fd_x)] {
            worst = worst.max(max_rel_err(an, fd));
            evaluated += fd.len();
        }
    }
    Ok(CheckResult {
        component: "adapter",
        max_rel_err: worst,
        tolerance: FIRST_ORDER_TOL,
        evaluated,
        informational: false,
    })
}

fn random_dataset(rng: &mut Rng, d_in: usize, d_out: usize, n: usize, name: &str) -> Result<Dataset, BiLevelError> {
    let x = gaussian_matrix(rng, d_in, n, 1.0)?;
    let y = gaussian_matrix(rng, d_out, n, 1.0)?;
    Ok(Dataset::new(name, x, y, 0)?)
}

fn check_model(
    rng: &mut Rng,
    spec: &ModelSpec,
    samples: usize,
    fault: FaultInjection,
) -> Result<(ToyModel, f64, usize), BiLevelError> {
    let mut model = ToyModel::build(rng, spec)?;
    let v: Vec<f64> = (0..model.value_param_len()).map(|_| 0.5 * rng.standard_normal()).collect();
    model.set_value_params(&v)?;
    let data = random_dataset(rng, model.d_in(), model.d_out(), samples, "gradcheck")?;
    let (_, grads) = model.loss_and_grads(&data)?;
    let (gv, mut ge) = ToyModel::flatten_grads(&grads);
    if fault == FaultInjection::AdapterSign {
        ge.iter_mut().for_each(|d| *d = -*d);
    }
    let fd_v = central_difference(
        |p| {
            let mut m = model.clone();
            m.set_vector_params(p).ok().and_then(|_| m.loss(&data).ok()).unwrap_or(f64::NAN)
        },
        &model.vector_params(),
        FD_STEP,
    );
    let fd_e = central_difference(
        |p| {
            let mut m = model.clone();
            m.set_value_params(p).ok().and_then(|_| m.loss(&data).ok()).unwrap_or(f64::NAN)
        },
        &model.value_params(),
        FD_STEP,
    );
    let err = max_rel_err(&gv, &fd_v).max(max_rel_err(&ge, &fd_e));
    Ok((model, err, fd_v.len() + fd_e.len()))
}

fn regularizer_suites(rng: &mut Rng, trials: usize) -> Result<[CheckResult; 2], BiLevelError> {
    let (mut r1_worst, mut r1_n) = (0.0f64, 0);
    let (mut r2_worst, mut r2_n) = (0.0f64, 0);
    for t in 0..trials {
        let (a, _) = random_adapter(rng, SingularMode::ALL[t % 3])?;
        let (_, grads) = r1_value_and_grads(std::slice::from_ref(&a));
        let (gp, gq) = &grads[0];
        let fd_p = central_difference(
            |p| {
                let mut b = a.clone();
                b.set_p(p).map_or(f64::NAN, |_| r1_value_and_grads(&[b]).0)
            },
            a.p().data(),
            FD_STEP,
        );
        let fd_q = central_difference(
            |q| {
                let mut b = a.clone();
                b.set_q(q).map_or(f64::NAN, |_| r1_value_and_grads(&[b]).0)
            },
            a.q().data(),
            FD_STEP,
        );
        r1_worst = r1_worst.max(max_rel_err(gp.data(), &fd_p)).max(max_rel_err(gq.data(), &fd_q));
        r1_n += fd_p.len() + fd_q.len();

        let sign = if t % 2 == 0 { R2Sign::Entropy } else { R2Sign::PaperLiteral };
        let lambdas: Vec<f64> = (0..1 + rng.below(6)).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
        let (_, g) = r2_value_and_grad(std::slice::from_ref(&lambdas), sign)?;
        let fd = central_difference(
            |l| r2_value_and_grad(&[l.to_vec()], sign).map_or(f64::NAN, |(v, _)| v),
            &lambdas,
            FD_STEP,
        );
        r2_worst = r2_worst.max(max_rel_err(&g[0], &fd));
        r2_n += fd.len();
    }
    Ok([
        CheckResult {
            component: "r1_orthogonality",
            max_rel_err: r1_worst,
            tolerance: FIRST_ORDER_TOL,
            evaluated: r1_n,
            informational: false,
        },
        CheckResult {
            component: "r2_entropy",
            max_rel_err: r2_worst,
            tolerance: FIRST_ORDER_TOL,
            evaluated: r2_n,
            informational: false,
        },
    ])
}

/// Upper objective after replaying `batches` as plain SGD steps from `v0`.
fn unrolled_upper<P: BiLevelProblem>(
    problem: &P,
    spec: OptimizerSpec,
    v0: &[f64],
    values: &[f64],
    batches: &[Vec<usize>],
    upper_batch: &[usize],
) -> f64 {
    let mut v = v0.to_vec();
    let mut opt = OptimizerState::new(spec, v.len());
    for b in batches {
        match problem.lower_grads(&v, values, b) {
            Ok(g) => opt.apply(&mut v, &g.d_vectors),
            Err(_) => return f64::NAN,
        }
    }
    problem.upper_grads(&v, values, upper_batch).map_or(f64::NAN, |g| g.value)
}

/// Runs all suites on the shapes and hyperparameters of `config`.
pub fn run_gradcheck(config: &ExperimentConfig, seed: u64) -> Result<GradcheckReport, BiLevelError> {
    let settings = &config.gradcheck;
    let fault = settings.inject_fault;
    let mut rng = Rng::derived(seed, 0x6C4E);
    let mut report = GradcheckReport::default();
    report.results.push(adapter_suite(&mut rng, settings.trials, fault)?);

    let spec_for = |mode| ModelSpec {
        widths: settings.widths.clone(),
        rank: settings.rank,
        mode,
        ..config.model.clone()
    };
    let mut model_worst = 0.0f64;
    let mut model_n = 0;
    for mode in SingularMode::ALL {
        let (_, err, n) = check_model(&mut rng, &spec_for(mode), settings.samples, fault)?;
        model_worst = model_worst.max(err);
        model_n += n;
    }
    report.results.push(CheckResult {
        component: "model",
        max_rel_err: model_worst,
        tolerance: FIRST_ORDER_TOL,
        evaluated: model_n,
        informational: false,
    });
    report.results.extend(regularizer_suites(&mut rng, settings.trials)?);

    let lower_spec = OptimizerSpec {
        kind: crate::bilevel::OptimizerKind::Sgd,
        lr: settings.lr,
        weight_decay: config.bilevel.lower.weight_decay,
    };
    let (mut exact_worst, mut fo_worst, mut n_hyper) = (0.0f64, 0.0f64, 0);
    for mode in SingularMode::ALL {
        for t1 in 1..=3 {
            let mut model = ToyModel::build(&mut rng, &spec_for(mode))?;
            let v: Vec<f64> = (0..model.value_param_len()).map(|_| 0.5 * rng.standard_normal()).collect();
            model.set_value_params(&v)?;
            let lower = random_dataset(&mut rng, model.d_in(), model.d_out(), settings.samples, "lower")?;
            let upper = random_dataset(&mut rng, model.d_in(), model.d_out(), settings.samples, "upper")?;
            let mut weights = config.bilevel.weights;
            if mode == SingularMode::RealValue {
                weights.gamma2 = 0.0;
            }
            let problem = AdapterProblem::new(model.clone(), &lower, &upper, weights, config.bilevel.r2_sign);
            let mut batcher = Batcher::new(lower.len(), config.bilevel.lower_batch, rng.next_u64());
            let batches: Vec<Vec<usize>> = (0..t1).map(|_| batcher.next_batch()).collect();
            let upper_batch: Vec<usize> = (0..upper.len()).collect();
            let v0 = model.vector_params();
            let values = model.value_params();
            let mut vectors = v0.clone();
            let mut opt = OptimizerState::new(lower_spec, vectors.len());
            let steps = batches
                .iter()
                .map(|b| lower_step(&problem, &mut vectors, &values, b, &mut opt, None))
                .collect::<Result<Vec<_>, _>>()?;
            let tape = UnrollTape {
                steps,
                sgd: Some((lower_spec.lr, lower_spec.weight_decay)),
            };
            let (_, exact) = hypergradient(&problem, &tape, &vectors, &values, &upper_batch, HypergradMode::UnrolledExact)?;
            let (_, first) = hypergradient(&problem, &tape, &vectors, &values, &upper_batch, HypergradMode::FirstOrder)?;
            let exact = if fault == FaultInjection::HypergradSign {
                exact.iter().zip(&first).map(|(e, f)| 2.0 * f - e).collect()
            } else {
                exact
            };
            let fd = central_difference(
                |e| unrolled_upper(&problem, lower_spec, &v0, e, &batches, &upper_batch),
                &values,
                HYPER_FD_STEP,
            );
            exact_worst = exact_worst.max(max_rel_err(&exact, &fd));
            fo_worst = fo_worst.max(max_rel_err(&first, &fd));
            n_hyper += fd.len();
        }
    }
    report.results.push(CheckResult {
        component: "hypergradient",
        max_rel_err: exact_worst,
        tolerance: HYPER_TOL,
        evaluated: n_hyper,
        informational: false,
    });
    report.results.push(CheckResult {
        component: "first_order_gap",
        max_rel_err: fo_worst,
        tolerance: HYPER_TOL,
        evaluated: n_hyper,
        informational: true,
    });
    Ok(report)
}
