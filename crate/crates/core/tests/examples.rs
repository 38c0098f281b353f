macro_rules! example {
    ($module:ident, $file:literal, $test:ident) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $test() {
            $module::run_example().unwrap();
        }
    };
}

example!(adapter_forward, "adapter_forward.rs", adapter_forward_runs);
example!(gradient_check, "gradient_check.rs", gradient_check_runs);
example!(hypergradient, "hypergradient.rs", hypergradient_matches_finite_difference);
example!(overfit_gap, "overfit_gap.rs", overfit_gap_runs);
example!(partition_sweep, "partition_sweep.rs", partition_sweep_runs);
example!(singular_value_histogram, "singular_value_histogram.rs", singular_value_histogram_runs);
example!(orthogonality, "orthogonality.rs", orthogonality_runs);
