// Unrolls three SGD steps on the singular vectors, then compares the exact
// hypergradient, the first-order shortcut, and a finite difference of the
// whole unrolled pipeline.

use std::error::Error;

use bilora::adapter::{SingularMode, W0Init};
use bilora::bilevel::{hypergradient, lower_step, AdapterProblem, BiLevelProblem, HypergradMode, OptimizerSpec, OptimizerState, UnrollTape};
use bilora::linalg::{gaussian_matrix, Rng};
use bilora::regularizers::{R2Sign, RegWeights};
use bilora::tasks::{Activation, Dataset, LossKind, ModelSpec, ToyModel};

const LR: f64 = 0.3;

fn unrolled_loss(problem: &AdapterProblem, v0: &[f64], values: &[f64], batches: &[Vec<usize>]) -> f64 {
    let mut v = v0.to_vec();
    for b in batches {
        let g = problem.lower_grads(&v, values, b).unwrap();
        v.iter_mut().zip(&g.d_vectors).for_each(|(p, d)| *p -= LR * d);
    }
    problem.upper_grads(&v, values, &[0, 1, 2, 3, 4]).unwrap().value
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut rng = Rng::new(3);
    let spec = ModelSpec {
        widths: vec![4, 6, 3],
        rank: 2,
        alpha: 2.0,
        mode: SingularMode::ApproxBinary,
        w0_init: W0Init::Gaussian(1.0),
        activation: Activation::Tanh,
        loss: LossKind::Mse,
    };
    let model = ToyModel::build(&mut rng, &spec)?;
    let lower = Dataset::new("lower", gaussian_matrix(&mut rng, 4, 8, 1.0)?, gaussian_matrix(&mut rng, 3, 8, 1.0)?, 0)?;
    let upper = Dataset::new("upper", gaussian_matrix(&mut rng, 4, 5, 1.0)?, gaussian_matrix(&mut rng, 3, 5, 1.0)?, 0)?;
    let problem = AdapterProblem::new(model.clone(), &lower, &upper, RegWeights::new(0.1, 0.05)?, R2Sign::Entropy);

    let batches: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![1, 3, 5, 7]];
    let (v0, e) = (model.vector_params(), model.value_params());
    let mut v = v0.clone();
    let mut opt = OptimizerState::new(OptimizerSpec::sgd(LR), v.len());
    let mut tape = UnrollTape { steps: vec![], sgd: Some((LR, 0.0)) };
    for b in &batches {
        tape.steps.push(lower_step(&problem, &mut v, &e, b, &mut opt, None)?);
    }
    let upper_batch = [0, 1, 2, 3, 4];
    let (_, exact) = hypergradient(&problem, &tape, &v, &e, &upper_batch, HypergradMode::UnrolledExact)?;
    let (_, first) = hypergradient(&problem, &tape, &v, &e, &upper_batch, HypergradMode::FirstOrder)?;

    println!("{:>3} {:>14} {:>14} {:>14}", "i", "exact", "first-order", "finite diff");
    let h = 1e-4;
    for i in 0..e.len() {
        let (mut plus, mut minus) = (e.clone(), e.clone());
        plus[i] += h;
        minus[i] -= h;
        let fd = (unrolled_loss(&problem, &v0, &plus, &batches) - unrolled_loss(&problem, &v0, &minus, &batches)) / (2.0 * h);
        println!("{i:>3} {:>14.6e} {:>14.6e} {fd:>14.6e}", exact[i], first[i]);
        if (exact[i] - fd).abs() > 1e-4 * fd.abs().max(1e-3) {
            return Err(format!("component {i} disagrees with the finite difference").into());
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
