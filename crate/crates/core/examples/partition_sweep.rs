// Sweeps the lower/upper split of the training set through the same code
// path as `bilora sweep`, which prints the aggregate table, then checks the
// table landed on disk.

use std::error::Error;
use std::fs;

use bilora::cli::{cmd_sweep, CommonArgs, SWEEP_FILE};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("sweep.conf");
    fs::write(&config, "method = bilora\nmodel.rank = 8\nmodel.mode = softmax\ntrain.steps = 150\n")?;
    let args = CommonArgs {
        config: Some(config),
        out: Some(dir.path().join("out")),
        seeds: Some("1,2".into()),
        ..CommonArgs::default()
    };
    let out = cmd_sweep(&args, &["split.lower_fraction=0.6,0.8".into(), "bilevel.gamma1=0,0.1".into()])?;
    let table = fs::read_to_string(out.join(SWEEP_FILE))?;
    assert_eq!(table.lines().count(), 5);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
