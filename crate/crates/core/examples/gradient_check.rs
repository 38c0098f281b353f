// The built-in gradient audit, the same one `bilora gradcheck` runs.

use std::error::Error;

use bilora::cli::ExperimentConfig;
use bilora::gradcheck::run_gradcheck;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config: ExperimentConfig = "method = bilora
model.rank = 2
model.mode = softmax
train.steps = 1
gradcheck.trials = 20
"
    .parse()?;
    let report = run_gradcheck(&config, 1)?;
    print!("{report}");
    if !report.passed() {
        return Err("gradient check failed".into());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
