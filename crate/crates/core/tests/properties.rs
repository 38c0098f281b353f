use bilora::adapter::SingularMode;
use bilora::bilevel::BiLevelError;
use bilora::cli::{run_seed, ExperimentConfig};
use bilora::linalg::{gaussian_matrix, Rng};
use bilora::regularizers::{r2_value_and_grad, R2Sign};
use bilora::tasks::{split_dataset, Dataset, SplitSpec};
use proptest::prelude::*;

fn columns(d: &Dataset) -> Vec<Vec<u64>> {
    let mut cols: Vec<Vec<u64>> = (0..d.len())
        .map(|c| {
            let mut col: Vec<u64> = d.inputs().column(c).iter().map(|x| x.to_bits()).collect();
            col.extend(d.targets().column(c).iter().map(|x| x.to_bits()));
            col
        })
        .collect();
    cols.sort();
    cols
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn split_is_a_partition_of_columns(n in 2usize..40, f in 0.05f64..0.999, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data = Dataset::new(
            "d",
            gaussian_matrix(&mut rng, 3, n, 1.0).unwrap(),
            gaussian_matrix(&mut rng, 2, n, 1.0).unwrap(),
            seed,
        )
        .unwrap();
        let s = split_dataset(&data, SplitSpec { lower_fraction: f, seed }).unwrap();
        prop_assert!(!s.lower.is_empty() && !s.upper.is_empty());
        let mut joined = columns(&s.lower);
        joined.extend(columns(&s.upper));
        joined.sort();
        prop_assert_eq!(joined, columns(&data));
    }

    #[test]
    fn entropy_descent_heads_to_nearer_endpoint(l0 in 0.001f64..0.999, lr in 0.001f64..0.05) {
        prop_assume!((l0 - 0.5).abs() > 1e-6);
        let target = if l0 < 0.5 { 0.0 } else { 1.0 };
        let mut l = l0;
        for _ in 0..50 {
            let (_, g) = r2_value_and_grad(&[vec![l]], R2Sign::Entropy).unwrap();
            let next = (l - lr * g[0][0]).clamp(1e-12, 1.0 - 1e-12);
            prop_assert!((next - target).abs() <= (l - target).abs());
            l = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn runs_finish_finite_or_name_the_diverging_step(
        mode_idx in 1usize..3,
        t1 in 1usize..4,
        t2 in 1usize..3,
        batch in 0usize..6,
        lr in prop::sample::select(vec![0.05, 0.2]),
        seed in 0u64..1000,
    ) {
        let mode = SingularMode::ALL[mode_idx];
        let cfg: ExperimentConfig = format!(
            "method = bilora\nmodel.rank = 2\nmodel.mode = {}\ntrain.steps = 8\ntask.d_in = 5\ntask.d_out = 4\ntask.n_train = 12\nmodel.hidden = 4\nbilevel.t1 = {t1}\nbilevel.t2 = {t2}\nbilevel.lower_batch = {batch}\nbilevel.gamma2 = 0.05\nlower.lr = {lr}\n",
            mode.as_str()
        )
        .parse()
        .unwrap();
        let before = bilora::cli::prepare(&cfg, seed).unwrap().model;
        match run_seed(&cfg, seed) {
            Ok(out) => {
                let steps: Vec<usize> = out.trace.records().iter().map(|r| r.step).collect();
                prop_assert_eq!(steps, (0..=8).collect::<Vec<_>>());
                prop_assert!(out.trace.records().iter().all(|r| r.is_finite()));
                prop_assert_eq!(before.frozen_weights(), out.model.frozen_weights());
            }
            Err(failure) => {
                let BiLevelError::Divergence { step, .. } = failure.error else {
                    return Err(TestCaseError::fail(format!("unexpected error {}", failure.error)));
                };
                prop_assert_eq!(step, failure.partial.len());
                prop_assert!(failure.partial.records().iter().all(|r| r.is_finite()));
            }
        }
    }
}
