// How far the singular vectors drift from orthonormal during training,
// with and without the orthogonality penalty.

use std::error::Error;

use bilora::cli::{run_seed, ExperimentConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    println!("{:>5} {:>14} {:>14}", "step", "gamma1 = 0", "gamma1 = 0.1");
    let mut traces = Vec::new();
    for gamma1 in [0.0, 0.1] {
        let cfg: ExperimentConfig = format!(
            "method = bilora\nmodel.rank = 8\nmodel.mode = softmax\ntrain.steps = 300\nbilevel.gamma1 = {gamma1}\n"
        )
        .parse()?;
        traces.push(run_seed(&cfg, 4)?.trace);
    }
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    for (a, b) in traces[0].records().iter().zip(traces[1].records()).step_by(30) {
        println!("{:>5} {:>14.4} {:>14.4}", a.step, mean(&a.defects), mean(&b.defects));
    }
    let (a, b) = (traces[0].last().ok_or("empty")?, traces[1].last().ok_or("empty")?);
    println!("final mean defect {:.4} vs {:.4}; final test loss {:.4} vs {:.4}", mean(&a.defects), mean(&b.defects), a.test_loss, b.test_loss);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
