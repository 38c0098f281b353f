// Final sigmoid singular values with and without the entropy penalty,
// binned the way `bilora histogram` bins them.

use std::error::Error;

use bilora::cli::{lambda_histogram, run_seed, ExperimentConfig};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    for gamma2 in [0.0, 0.1] {
        let cfg: ExperimentConfig = format!(
            "method = bilora\nmodel.rank = 8\nmodel.mode = approx_binary\ntrain.steps = 300\nupper.optimizer = sgd\nupper.lr = 1\nbilevel.gamma2 = {gamma2}\n"
        )
        .parse()?;
        let traces = [1, 2]
            .into_iter()
            .map(|s| Ok((format!("seed{s}"), run_seed(&cfg, s)?.trace)))
            .collect::<Result<Vec<_>, Box<dyn Error>>>()?;
        let table = lambda_histogram(&traces)?;
        println!("gamma2 = {gamma2}: {} values in [{:.3}, {:.3}]", table.total(), table.min, table.max);
        for (b, c) in table.counts.iter().enumerate() {
            let (lo, hi) = table.edges(b);
            println!("  [{lo:.3}, {hi:.3}) {}", "#".repeat(*c));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
