use griddpp::dppa::{AttentionWeights, KernelConfig, Selection, SelectionPlan};
use griddpp::gridcode::{build_codebook, GridCodeConfig, GridCodebook};
use griddpp::tasks::{gen_analogy_tests, gen_analogy_training, gen_arithmetic, DatasetSplit, Regime, RejectionBudget};
use griddpp::trainer::*;
use griddpp::Error;

const M: i64 = 5;

fn codebook() -> GridCodebook {
    build_codebook(&GridCodeConfig::default()).unwrap()
}

fn analogies(n_train: usize, n_val: usize, per_region: usize) -> DatasetSplit {
    let mut data = gen_analogy_training(M, n_train, n_val, 11).unwrap();
    data.tests = gen_analogy_tests(M, &(1..=9).collect::<Vec<_>>(), per_region, Regime::Translation, 1000, 11).unwrap();
    data
}

fn arithmetic() -> DatasetSplit {
    gen_arithmetic(M, 200, 60, 20, &(1..=9).collect::<Vec<_>>(), 1000, RejectionBudget::default(), 5).unwrap().0
}

fn small(task: Task, method: Method) -> TrainConfig {
    let mut c = TrainConfig::defaults(task, ScorerKind::Lstm, method);
    c.hidden = 8;
    c.batch_size = 32;
    c.dpp_epochs = 2;
    c.task_epochs = 3;
    c.learning_rate = 1e-2;
    c.seed = 3;
    c
}

fn run(config: &TrainConfig, data: &DatasetSplit, book: &GridCodebook) -> TrainedRun {
    let kc = KernelConfig::default();
    let inputs = TrainInputs { data, codebook: book, kernel_config: &kc, kernel: None, attention: None };
    Session::prepare(config, inputs).unwrap().train().unwrap()
}

fn assert_same_losses(a: &RunRecord, b: &RunRecord) {
    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert!((x.loss - y.loss).abs() <= 1e-12 && (x.metric - y.metric).abs() <= 1e-12);
    }
}

#[test]
fn zero_rate_locked_dropout_is_no_dppa() {
    let book = codebook();
    let data = analogies(160, 40, 10);
    let a = run(&small(Task::Analogy, Method::LockedDropout { rate: 0.0 }), &data, &book);
    let b = run(&small(Task::Analogy, Method::NoDppa), &data, &book);
    assert_same_losses(&a.record, &b.record);
    assert_eq!(a.record.regions, b.record.regions);
}

#[test]
fn zero_lambda_onestep_is_trainable_attention() {
    let book = codebook();
    let data = analogies(160, 40, 10);
    let base = run(&small(Task::Analogy, Method::NoDppaAttention), &data, &book);
    for m in [Method::OnestepWhole { lambda: 0.0 }, Method::OnestepWithin { lambda: 0.0 }] {
        let r = run(&small(Task::Analogy, m), &data, &book);
        assert_same_losses(&r.record, &base.record);
    }
}

#[test]
fn positive_dropout_changes_training_but_not_initial_evaluation() {
    let book = codebook();
    let data = analogies(160, 40, 10);
    let a = run(&small(Task::Analogy, Method::LockedDropout { rate: 0.5 }), &data, &book);
    let b = run(&small(Task::Analogy, Method::NoDppa), &data, &book);
    assert_eq!(a.record.epochs[..2], b.record.epochs[..2]);
    assert_ne!(a.record.step_losses, b.record.step_losses);
}

#[test]
fn regions_are_reported_in_order_from_the_best_epoch() {
    let book = codebook();
    let data = analogies(160, 40, 10);
    let r = run(&small(Task::Analogy, Method::Dppa), &data, &book).record;
    let labels: Vec<&str> = r.regions.iter().map(|m| m.region.as_str()).collect();
    assert_eq!(labels, ["train", "val", "1", "2", "3", "4", "5", "6", "7", "8", "9"]);

    // Replay the log: the best epoch is the first strict maximum.
    let vals: Vec<f64> = (0..=3).map(|e| r.epoch_metric(e, "val").unwrap().metric).collect();
    let mut best = 0;
    for (e, &v) in vals.iter().enumerate() {
        if v > vals[best] {
            best = e;
        }
    }
    assert_eq!(r.best_epoch, best);
    assert_eq!(r.region("val", "all").unwrap().value, vals[best]);
    let att = r.attention.unwrap();
    assert_eq!(att.steps, 2 * 5);
    assert_eq!(att.per_frequency_objective.len(), 9);
}

#[test]
fn every_method_trains_and_lowers_its_loss() {
    let book = codebook();
    let data = analogies(480, 240, 8);
    let methods = [
        Method::Dppa,
        Method::Tcn,
        Method::LockedDropout { rate: 0.5 },
        Method::L1 { lambda: 1e-3 },
        Method::NoDppa,
        Method::OnestepWhole { lambda: 1.0 },
        Method::OnestepWithin { lambda: 1.0 },
        Method::TopK { k: 2 },
        Method::EmbeddingAblation { embedding: AblationEmbedding::OneHot, attention_lambda: None, encoder: false },
        Method::EmbeddingAblation {
            embedding: AblationEmbedding::Smoothed { sigma: 1.0 },
            attention_lambda: Some(0.1),
            encoder: true,
        },
        Method::EmbeddingAblation { embedding: AblationEmbedding::Grid, attention_lambda: None, encoder: true },
        Method::Regression { dppa: true },
        Method::Regression { dppa: false },
    ];
    for method in methods {
        let mut cfg = small(Task::Analogy, method);
        cfg.task_epochs = 8;
        cfg.hidden = 16;
        cfg.learning_rate = if matches!(method, Method::EmbeddingAblation { encoder: true, .. }) { 2e-3 } else { 2e-2 };
        let r = run(&cfg, &data, &book).record;
        let first = r.epoch_metric(0, "train").unwrap().loss;
        let at_best = r.epoch_metric(r.best_epoch, "train").unwrap().loss;
        eprintln!("{}: best epoch {} loss {first} -> {at_best}", r.method, r.best_epoch);
        assert!(at_best < first, "{}: {at_best} !< {first}", r.method);
        let expected_regions = if matches!(method, Method::EmbeddingAblation { .. }) { 3 } else { 9 };
        assert_eq!(r.regions.len(), 2 + expected_regions, "{}", r.method);
        assert_eq!(r.metric, if method.is_regression() { Metric::Mse } else { Metric::Accuracy });
        assert!(r.regions.iter().all(|m| m.value.is_finite()));
    }
}

#[test]
fn arithmetic_reports_per_operation_subsets() {
    let book = codebook();
    let data = arithmetic();
    for method in [Method::Dppa, Method::L1 { lambda: 0.01 }, Method::Regression { dppa: true }] {
        let r = run(&small(Task::Arithmetic, method), &data, &book).record;
        for region in ["train", "val", "5"] {
            let all = r.region(region, "all").unwrap();
            let add = r.region(region, "add").unwrap();
            let mul = r.region(region, "multiply").unwrap();
            assert_eq!(add.n + mul.n, all.n);
            assert_eq!(add.n, mul.n);
            let pooled = (add.value * add.n as f64 + mul.value * mul.n as f64) / all.n as f64;
            assert!((pooled - all.value).abs() < 1e-12);
        }
    }
}

#[test]
fn transformer_scorer_trains() {
    let book = codebook();
    let data = analogies(64, 16, 4);
    for method in [Method::Dppa, Method::LockedDropout { rate: 0.3 }] {
        let mut cfg = small(Task::Analogy, method);
        cfg.scorer = ScorerKind::Transformer;
        cfg.transformer = griddpp::nn::transformer::TransformerConfig { model_dim: 8, heads: 2, layers: 1, ff_dim: 16 };
        cfg.task_epochs = 1;
        let r = run(&cfg, &data, &book).record;
        assert_eq!(r.step_losses.len(), 2);
    }
}

#[test]
fn untrained_scorer_is_at_chance() {
    let book = codebook();
    let data = analogies(64, 3000, 1);
    let mut cfg = small(Task::Analogy, Method::NoDppa);
    cfg.task_epochs = 0;
    let r = run(&cfg, &data, &book).record;
    let acc = r.region("val", "all").unwrap().value;
    let p = 1.0f64 / 7.0;
    let sigma = (p * (1.0 - p) / 3000.0).sqrt();
    assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn accuracy_with_a_planted_leak_is_perfect_and_ties_are_errors() {
    let targets = [0, 3, 6, 2];
    let leak: Vec<f64> = targets.iter().flat_map(|&t| (0..7).map(move |k| if k == t { 1.0 } else { 0.0 })).collect();
    assert!(correct_flags(&leak, &targets).iter().all(|&c| c));
    let flat = vec![0.5; 28];
    assert!(correct_flags(&flat, &targets).iter().all(|&c| !c));
    let mut tie = leak.clone();
    tie[1] = 1.0;
    assert_eq!(correct_flags(&tie, &targets), [false, true, true, true]);
}

#[test]
fn evaluation_rejects_parameters_of_another_architecture() {
    let book = codebook();
    let data = analogies(64, 16, 4);
    let kc = KernelConfig::default();
    let inputs = TrainInputs { data: &data, codebook: &book, kernel_config: &kc, kernel: None, attention: None };
    let dppa = Session::prepare(&small(Task::Analogy, Method::Dppa), inputs).unwrap();
    let full = Session::prepare(&small(Task::Analogy, Method::NoDppa), inputs).unwrap();
    let err = dppa.evaluate(full.initial_params()).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }));
}

#[test]
fn precomputed_attention_is_reused() {
    let book = codebook();
    let data = analogies(64, 16, 4);
    let kc = KernelConfig::default();
    let cfg = small(Task::Analogy, Method::Dppa);
    let mut inputs = TrainInputs { data: &data, codebook: &book, kernel_config: &kc, kernel: None, attention: None };
    let fitted = Session::prepare(&cfg, inputs).unwrap().attention().unwrap().clone();
    let mut planted = fitted.clone();
    planted.f_max = (fitted.f_max + 1) % 9;
    inputs.attention = Some(&planted);
    assert_eq!(Session::prepare(&cfg, inputs).unwrap().attention().unwrap().f_max, planted.f_max);
}

#[test]
fn all_bands_top_k_is_a_block_permutation_of_the_full_code() {
    let attention = AttentionWeights {
        w: vec![0.5; 900],
        per_frequency_objective: vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0, 5.0],
        f_max: 5,
        block_size: 100,
    };
    let plan = SelectionPlan::new(&Selection::TopK(9), &attention).unwrap();
    let mut sorted = plan.columns.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..900).collect::<Vec<_>>());
    for block in plan.columns.chunks(100) {
        assert_eq!(block[0] % 100, 0);
        assert!(block.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

#[test]
fn smoothed_codes_are_peak_normalised_bumps() {
    let e = Embedder::Axis { len: 20, sigma: Some(2.0) };
    let v = e.embed([7, 12]).unwrap();
    assert_eq!(v.len(), 40);
    assert_eq!(v[7], 1.0);
    assert_eq!(v[20 + 12], 1.0);
    assert!((v[5] - v[9]).abs() < 1e-15);
    assert!((v[8] - (-1.0f64 / 8.0).exp()).abs() < 1e-15);
    let one_hot = Embedder::Axis { len: 20, sigma: None }.embed([0, 19]).unwrap();
    assert_eq!(one_hot.iter().sum::<f64>(), 2.0);
    assert_eq!((one_hot[0], one_hot[39]), (1.0, 1.0));
    assert!(Embedder::Axis { len: 20, sigma: None }.embed([20, 0]).is_err());
}

#[test]
fn diagnostic_vanishes_for_identical_distributions() {
    let book = codebook();
    let mut data = arithmetic();
    let attention =
        AttentionWeights { w: vec![0.5; 900], per_frequency_objective: vec![0.0; 9], f_max: 4, block_size: 100 };
    let region = data.tests[0].0;
    data.tests = vec![(region, data.train.clone())];
    let d = multiplication_diagnostic(&book, &attention, &data).unwrap();
    assert!(d.add.abs() < 1e-12 && d.multiply.abs() < 1e-12);
    data.tests.clear();
    assert!(matches!(multiplication_diagnostic(&book, &attention, &data), Err(Error::Empty(_))));
}

#[test]
fn diagnostic_ignores_problem_order() {
    let book = codebook();
    let mut data = arithmetic();
    let attention =
        AttentionWeights { w: vec![0.5; 900], per_frequency_objective: vec![0.0; 9], f_max: 4, block_size: 100 };
    let d = multiplication_diagnostic(&book, &attention, &data).unwrap();
    for (_, problems) in &mut data.tests {
        problems.reverse();
    }
    data.train.rotate_left(7);
    assert_eq!(multiplication_diagnostic(&book, &attention, &data).unwrap(), d);
}

#[test]
fn config_defaults_and_schema() {
    let lstm = TrainConfig::defaults(Task::Analogy, ScorerKind::Lstm, Method::Dppa);
    assert_eq!((lstm.batch_size, lstm.learning_rate, lstm.dpp_epochs, lstm.task_epochs), (256, 1e-3, 50, 50));
    let arith = TrainConfig::defaults(Task::Arithmetic, ScorerKind::Lstm, Method::Dppa);
    assert_eq!((arith.dpp_epochs, arith.task_epochs, arith.regime), (500, 500, TestRegime::Regions));
    let tf = TrainConfig::defaults(Task::Analogy, ScorerKind::Transformer, Method::Dppa);
    assert_eq!((tf.batch_size, tf.learning_rate), (128, 5e-4));
    let tf = TrainConfig::defaults(Task::Arithmetic, ScorerKind::Transformer, Method::Dppa);
    assert_eq!((tf.batch_size, tf.learning_rate), (128, 5e-5));

    let json = serde_json::to_value(&lstm).unwrap();
    let back: TrainConfig = serde_json::from_value(json.clone()).unwrap();
    assert_eq!(back, lstm);
    let mut extra = json;
    extra["surprise"] = serde_json::json!(1);
    assert!(serde_json::from_value::<TrainConfig>(extra).is_err());

    let mut bad = lstm.clone();
    bad.regime = TestRegime::Regions;
    assert!(bad.validate().is_err());
    bad = lstm.clone();
    bad.method = Method::LockedDropout { rate: 1.0 };
    assert!(bad.validate().is_err());
}

#[test]
fn mismatched_task_is_rejected() {
    let book = codebook();
    let data = arithmetic();
    let kc = KernelConfig::default();
    let inputs = TrainInputs { data: &data, codebook: &book, kernel_config: &kc, kernel: None, attention: None };
    assert!(matches!(Session::prepare(&small(Task::Analogy, Method::NoDppa), inputs), Err(Error::InvalidConfig(_))));
}
