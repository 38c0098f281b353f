// Plain LoRA against the bi-level variant on the noisy teacher task, using
// the shipped defaults. Prints the train/test gap at each run's best
// checkpoint and at the end.

use std::error::Error;

use bilora::cli::{median, run_seed, ExperimentConfig};

const SEEDS: [u64; 3] = [1, 2, 3];

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let lora: ExperimentConfig = "method = lora\nmodel.rank = 8\nmodel.mode = real_value\ntrain.steps = 300\n".parse()?;
    let bilora: ExperimentConfig = "method = bilora\nmodel.rank = 8\nmodel.mode = softmax\ntrain.steps = 300\n".parse()?;
    for (name, cfg) in [("lora", &lora), ("bilora", &bilora)] {
        let mut at_best = Vec::new();
        for seed in SEEDS {
            let trace = run_seed(cfg, seed)?.trace;
            let best = trace.best_test().ok_or("empty trace")?;
            let last = trace.last().ok_or("empty trace")?;
            println!(
                "{name:<7} seed {seed}: best test {:.4} at step {:>3} (gap {:.4}), final test {:.4} (gap {:.4})",
                best.test_loss,
                best.step,
                best.gap(),
                last.test_loss,
                last.gap()
            );
            at_best.push(best.gap());
        }
        println!("{name:<7} median gap at best checkpoint {:.4}", median(at_best).unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
