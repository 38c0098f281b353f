#![allow(dead_code)]

use bilora::adapter::{SingularMode, W0Init};
use bilora::bilevel::{BiLevelProblem, Result as BlResult};
use bilora::linalg::{gaussian_matrix, Rng};
use bilora::tasks::{Activation, Dataset, LossKind, ModelSpec, ToyModel};

/// `|a - b| / max(|a|, |b|, floor)`; with `floor = 1e-3` a component under
/// 1e-3 in magnitude is held to an absolute error of `tol * 1e-3`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

pub fn regression_data(seed: u64, d_in: usize, d_out: usize, n: usize, name: &str) -> Dataset {
    let mut rng = Rng::new(seed);
    let x = gaussian_matrix(&mut rng, d_in, n, 1.0).unwrap();
    let y = gaussian_matrix(&mut rng, d_out, n, 1.0).unwrap();
    Dataset::new(name, x, y, seed).unwrap()
}

/// Single linear adapter with squared loss: the bilinear verification problem.
pub fn bilinear_model(seed: u64, mode: SingularMode) -> ToyModel {
    let spec = ModelSpec {
        widths: vec![3, 4],
        rank: 2,
        alpha: 2.0,
        mode,
        w0_init: W0Init::Gaussian(1.0),
        activation: Activation::Identity,
        loss: LossKind::Mse,
    };
    randomize_values(ToyModel::build(&mut Rng::new(seed), &spec).unwrap(), seed)
}

pub fn tanh_model(seed: u64, mode: SingularMode) -> ToyModel {
    let spec = ModelSpec {
        widths: vec![3, 4, 3],
        rank: 2,
        alpha: 2.0,
        mode,
        w0_init: W0Init::Gaussian(1.0),
        activation: Activation::Tanh,
        loss: LossKind::Mse,
    };
    randomize_values(ToyModel::build(&mut Rng::new(seed), &spec).unwrap(), seed)
}

fn randomize_values(mut model: ToyModel, seed: u64) -> ToyModel {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let v: Vec<f64> = (0..model.value_param_len()).map(|_| 0.5 * rng.standard_normal()).collect();
    model.set_value_params(&v).unwrap();
    model
}

/// Upper objective after running `batches.len()` plain SGD steps from
/// `vectors0` with the singular values fixed at `values`.
pub fn unrolled_objective<P: BiLevelProblem>(
    problem: &P,
    vectors0: &[f64],
    values: &[f64],
    batches: &[Vec<usize>],
    upper_batch: &[usize],
    lr: f64,
) -> BlResult<f64> {
    let mut v = vectors0.to_vec();
    for b in batches {
        let g = problem.lower_grads(&v, values, b)?;
        for (p, d) in v.iter_mut().zip(&g.d_vectors) {
            *p -= lr * d;
        }
    }
    Ok(problem.upper_grads(&v, values, upper_batch)?.value)
}

/// Central-difference gradient of the unrolled objective in every value.
pub fn pipeline_fd<P: BiLevelProblem>(
    problem: &P,
    vectors0: &[f64],
    values: &[f64],
    batches: &[Vec<usize>],
    upper_batch: &[usize],
    lr: f64,
    h: f64,
) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let mut plus = values.to_vec();
            let mut minus = values.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = unrolled_objective(problem, vectors0, &plus, batches, upper_batch, lr).unwrap();
            let fm = unrolled_objective(problem, vectors0, &minus, batches, upper_batch, lr).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central difference of `f` along every coordinate of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
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
