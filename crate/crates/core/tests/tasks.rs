use bilora::adapter::{SingularMode, W0Init};
use bilora::bilevel::{BiLevelError, OptimizerSpec};
use bilora::cli::{median, prepare, run_seed, ExperimentConfig};
use bilora::linalg::Rng;
use bilora::tasks::{
    make_teacher_task, split_dataset, train_bilora, train_lora_baseline, Activation, BaselineConfig, BaselineForm,
    LossKind, ModelSpec, SplitSpec, TeacherTask, ToyModel,
};

fn linear_spec(d: usize, rank: usize) -> ModelSpec {
    ModelSpec {
        widths: vec![d, d],
        rank,
        alpha: rank as f64,
        mode: SingularMode::RealValue,
        w0_init: W0Init::Zero,
        activation: Activation::Identity,
        loss: LossKind::Mse,
    }
}

fn adamw_baseline(lr: f64, epochs: usize) -> BaselineConfig {
    BaselineConfig {
        optimizer: OptimizerSpec::adamw(lr, 0.0),
        epochs,
        batch: 0,
        form: BaselineForm::PseudoSvd,
        grad_clip: None,
        seed: 3,
    }
}

#[test]
fn noiseless_teacher_is_learned_by_the_baseline() {
    let task = TeacherTask {
        d_in: 8,
        d_out: 8,
        n_train: 256,
        n_test: 128,
        noise_std: 0.0,
        teacher_rank: 2,
    };
    let (train, test) = make_teacher_task(&mut Rng::new(1), &task).unwrap();
    let model = ToyModel::build(&mut Rng::new(2), &linear_spec(8, 4)).unwrap();
    let out = train_lora_baseline(model, &train, &test, &adamw_baseline(0.02, 1500), 0).unwrap();
    let last = out.trace.last().unwrap();
    assert!(last.test_loss < 1e-3, "test loss {}", last.test_loss);
    assert_eq!(out.trace.len(), 1501);
}

#[test]
fn overparameterized_baseline_interpolates_small_train_set() {
    let task = TeacherTask {
        d_in: 8,
        d_out: 8,
        n_train: 6,
        n_test: 16,
        noise_std: 0.0,
        teacher_rank: 2,
    };
    let (train, test) = make_teacher_task(&mut Rng::new(4), &task).unwrap();
    let model = ToyModel::build(&mut Rng::new(5), &linear_spec(8, 4)).unwrap();
    let out = train_lora_baseline(model, &train, &test, &adamw_baseline(0.02, 1500), 0).unwrap();
    assert!(out.trace.last().unwrap().train_loss < 1e-3);
}

#[test]
fn zero_learning_rate_gives_flat_baseline_trace() {
    let cfg: ExperimentConfig =
        "method = lora\nmodel.rank = 4\nmodel.mode = real_value\ntrain.steps = 7\ntask.d_in = 6\ntask.d_out = 6\nmodel.hidden = 5\nlora.lr = 0\n"
            .parse()
            .unwrap();
    let out = run_seed(&cfg, 9).unwrap();
    assert_eq!(out.trace.len(), 8);
    let first = &out.trace.records()[0];
    for r in out.trace.records() {
        assert_eq!(r.train_loss, first.train_loss);
        assert_eq!(r.test_loss, first.test_loss);
    }
}

#[test]
fn two_factor_form_starts_from_zero_increment() {
    let task = TeacherTask {
        d_in: 5,
        d_out: 4,
        n_train: 10,
        n_test: 10,
        noise_std: 0.1,
        teacher_rank: 2,
    };
    let (train, test) = make_teacher_task(&mut Rng::new(6), &task).unwrap();
    let mut spec = linear_spec(5, 2);
    spec.widths = vec![5, 4];
    spec.w0_init = W0Init::Gaussian(1.0);
    let model = ToyModel::build(&mut Rng::new(7), &spec).unwrap();
    let w0_loss = model.loss(&train).unwrap();
    let mut cfg = adamw_baseline(0.01, 20);
    cfg.form = BaselineForm::TwoFactor;
    let out = train_lora_baseline(model, &train, &test, &cfg, 0).unwrap();
    assert_eq!(out.trace.records()[0].train_loss, w0_loss);
    assert!(out.trace.last().unwrap().train_loss < w0_loss);
    assert_eq!(out.model.value_params(), vec![1.0; 2]);
}

#[test]
fn baseline_rejects_non_real_value_adapters() {
    let task = TeacherTask {
        d_in: 3,
        d_out: 3,
        n_train: 4,
        n_test: 4,
        noise_std: 0.0,
        teacher_rank: 1,
    };
    let (train, test) = make_teacher_task(&mut Rng::new(1), &task).unwrap();
    let mut spec = linear_spec(3, 2);
    spec.mode = SingularMode::Softmax;
    let model = ToyModel::build(&mut Rng::new(1), &spec).unwrap();
    let err = train_lora_baseline(model, &train, &test, &adamw_baseline(0.01, 2), 0).unwrap_err();
    assert!(matches!(err.error, BiLevelError::InvalidConfig(_)));
}

#[test]
fn full_lower_partition_is_rejected_by_the_bilevel_driver() {
    let cfg: ExperimentConfig =
        "method = bilora\nmodel.rank = 2\nmodel.mode = softmax\ntrain.steps = 3\ntask.d_in = 4\ntask.d_out = 4\nmodel.hidden = 4\n"
            .parse()
            .unwrap();
    let p = prepare(&cfg, 1).unwrap();
    let split = SplitSpec {
        lower_fraction: 1.0,
        seed: 0,
    };
    let parts = split_dataset(&p.train, split).unwrap();
    assert_eq!(parts.lower.len(), p.train.len());
    assert!(parts.upper.is_empty());
    let err = train_bilora(p.model, &p.train, &p.test, split, &cfg.bilevel, 0).unwrap_err();
    assert_eq!(err.error, BiLevelError::EmptyDataset("upper-level"));
}

#[test]
fn tiny_split_is_adjusted_to_keep_upper_set() {
    let cfg: ExperimentConfig =
        "method = bilora\nmodel.rank = 2\nmodel.mode = softmax\ntrain.steps = 2\ntask.d_in = 4\ntask.d_out = 4\ntask.n_train = 3\nmodel.hidden = 4\nsplit.lower_fraction = 0.9\n"
            .parse()
            .unwrap();
    let out = run_seed(&cfg, 2).unwrap();
    assert!(out.split_adjusted);
    assert_eq!(out.trace.len(), 3);
}

#[test]
fn identical_seeds_identical_traces() {
    let cfg: ExperimentConfig =
        "method = bilora\nmodel.rank = 3\nmodel.mode = approx_binary\ntrain.steps = 20\ntask.d_in = 6\ntask.d_out = 6\nmodel.hidden = 6\nbilevel.lower_batch = 5\nbilevel.gamma2 = 0.1\n"
            .parse()
            .unwrap();
    let a = run_seed(&cfg, 11).unwrap().trace;
    let b = run_seed(&cfg, 11).unwrap().trace;
    assert_eq!(a.to_csv(), b.to_csv());
    assert_ne!(a.to_csv(), run_seed(&cfg, 12).unwrap().trace.to_csv());
}

#[test]
fn snapshot_cadence_and_final_snapshot() {
    let cfg: ExperimentConfig =
        "method = bilora\nmodel.rank = 2\nmodel.mode = softmax\ntrain.steps = 25\ntask.d_in = 4\ntask.d_out = 4\nmodel.hidden = 4\n"
            .parse()
            .unwrap();
    let trace = run_seed(&cfg, 1).unwrap().trace;
    let steps: Vec<usize> = trace.records().iter().filter(|r| r.lambdas.is_some()).map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 25]);
    assert!(trace.records()[1..].iter().all(|r| r.lower_loss.is_some() && r.upper_loss.is_some()));
    assert!(trace.records()[0].lower_loss.is_none());
}

#[test]
fn both_gamma1_settings_shrink_final_gap_versus_baseline() {
    let base = "model.rank = 8\ntrain.steps = 300\n";
    let lora: ExperimentConfig = format!("{base}method = lora\nmodel.mode = real_value\n").parse().unwrap();
    let gaps = |cfg: &ExperimentConfig| {
        median((1..=10).map(|s| run_seed(cfg, s).unwrap().trace.last().unwrap().gap())).unwrap()
    };
    let baseline = gaps(&lora);
    for g1 in ["0", "0.1"] {
        let cfg: ExperimentConfig = format!("{base}method = bilora\nmodel.mode = softmax\nbilevel.gamma1 = {g1}\n")
            .parse()
            .unwrap();
        let g = gaps(&cfg);
        assert!(g < baseline, "gamma1 {g1}: {g} vs baseline {baseline}");
    }
}
