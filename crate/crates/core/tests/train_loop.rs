use hodgnn::graph::{gen_counting_dataset, gen_erdos_renyi, Dataset, Pattern, Split, Task};
use hodgnn::hod::{BaseInit, HodModel, HodSpec, NodeEncoderKind};
use hodgnn::train::{evaluate, fd_grads, load_checkpoint, loss_and_grads, save_checkpoint, train, GradMode, Loss, ParamStore, TrainConfig};
use hodgnn::verify::{grad_check, grad_suite, random_grad_case, MAX_GRAD_CASE_PARAMS};
use hodgnn::{Activation, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn counting_spec(max_order: usize) -> HodSpec {
    HodSpec {
        input_width: 1,
        base_hidden: 1,
        base_depth: 3,
        base_activation: Activation::Identity,
        base_init: BaseInit::Identity { noise: 0.0 },
        residual: false,
        k: 1,
        max_order,
        node_encoder: if max_order > 0 { NodeEncoderKind::Diagonal } else { NodeEncoderKind::None },
        encoder_width: 4,
        use_out: false,
        use_base: true,
        hidden: 6,
        depth: 1,
        activation: Activation::Silu,
        output_width: 1,
        graph_level: false,
        bound: 1.0,
    }
}

fn small_model(max_order: usize, seed: u64) -> HodModel {
    counting_spec(max_order).build(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn triangles(graphs: usize, seed: u64) -> Dataset {
    gen_counting_dataset(graphs, 5, 9, 0.4, Pattern::Cycle3, seed).unwrap()
}

#[test]
fn random_pipelines_pass_gradient_check() {
    let results = grad_suite(5, 4).unwrap();
    for r in &results {
        assert!(r.pass, "{:?}", r.detail);
        assert!(r.detail.params <= MAX_GRAD_CASE_PARAMS);
    }
}

#[test]
fn node_level_gradients_match_finite_differences() {
    let data = triangles(6, 1);
    let model = small_model(2, 3);
    for loss in [Loss::Mse, Loss::Mae] {
        let report = grad_check(&model, &data.graphs[0], Task::NodeRegression, loss, 1e-4, 1e-8).unwrap();
        assert_eq!(report.failed, 0, "{report:?}");
    }
}

#[test]
fn classification_gradients_match_finite_differences() {
    let (model, g) = random_grad_case(17).unwrap();
    let g = g.with_graph_label(vec![1.0]);
    let report = grad_check(&model, &g, Task::GraphClassification, Loss::BceLogits, 1e-4, 1e-8).unwrap();
    assert_eq!(report.failed, 0, "{report:?}");
}

#[test]
fn seeded_training_is_bitwise_repeatable() {
    let data = triangles(30, 2);
    let model = small_model(1, 0);
    let cfg = TrainConfig::new(Loss::Mae, 4, 5, 9);
    let dir = tempfile::tempdir().unwrap();
    let a = train(&model, &data, &cfg).unwrap();
    let b = train(&model, &data, &cfg).unwrap();
    a.write_csv(dir.path().join("a.csv")).unwrap();
    b.write_csv(dir.path().join("b.csv")).unwrap();
    let (x, y) = (std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
    assert_eq!(x, y);
    assert_eq!(String::from_utf8(x).unwrap().lines().count(), 5);

    let other = train(&model, &data, &TrainConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(other.train_losses(), a.train_losses());
}

#[test]
fn training_reduces_loss() {
    let data = triangles(40, 3);
    let model = small_model(1, 1);
    let mut cfg = TrainConfig::new(Loss::Mse, 15, 4, 0);
    cfg.adam.lr_downstream = 1e-2;
    let history = train(&model, &data, &cfg).unwrap();
    let last = history.epochs.last().unwrap();
    assert!(last.train_loss < 0.5 * history.initial_train_loss, "{history:?}");
    assert!(history.best_val_loss <= history.initial_val_loss);
    let best_val = evaluate(&history.best.model, &data, &data.split.val, Loss::Mse).unwrap();
    assert!((best_val - history.best_val_loss).abs() < 1e-12);
}

#[test]
fn finite_difference_mode_tracks_tape() {
    let data = triangles(12, 4);
    let mut spec = counting_spec(1);
    spec.hidden = 3;
    spec.encoder_width = 2;
    let model = spec.build(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(ParamStore::from_model(&model).unwrap().num_values() <= hodgnn::train::MAX_FD_PARAMS);
    let (tape_loss, tape) = loss_and_grads(&model, &data.graphs[0], Task::NodeRegression, Loss::Mse).unwrap();
    let (fd_loss, fd) = fd_grads(&model, &data.graphs[0], Task::NodeRegression, Loss::Mse, 1e-5).unwrap();
    assert_eq!(tape_loss, fd_loss);
    assert_eq!(tape.len(), fd.len());

    let cfg = TrainConfig::new(Loss::Mse, 3, 4, 1);
    let a = train(&model, &data, &cfg).unwrap();
    let b = train(&model, &data, &TrainConfig { grad_mode: GradMode::FiniteDiff, ..cfg }).unwrap();
    for (x, y) in a.train_losses().iter().zip(b.train_losses()) {
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let data = triangles(20, 5);
    let history = train(&small_model(2, 4), &data, &TrainConfig::new(Loss::Mae, 3, 4, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&history.best, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.model, history.best.model);
    assert_eq!(back.optimizer_state, history.best.optimizer_state);
    assert_eq!(back.epoch, history.best.epoch);
    let g = &data.graphs[data.split.test[0]];
    assert_eq!(back.model.forward(g).unwrap().prediction, history.best.model.forward(g).unwrap().prediction);
}

#[test]
fn non_finite_loss_aborts() {
    let mut data = triangles(10, 6);
    let g = data.graphs[0].clone();
    let mut labels = g.node_labels().unwrap().to_vec();
    labels[0] = f64::NAN;
    data.graphs[0] = g.with_node_labels(labels).unwrap();
    let err = train(&small_model(1, 0), &data, &TrainConfig::new(Loss::Mse, 2, 4, 0)).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
}

#[test]
fn invalid_setups_rejected() {
    let data = triangles(10, 7);
    let model = small_model(1, 0);
    assert!(train(&model, &data, &TrainConfig::new(Loss::BceLogits, 1, 4, 0)).is_err());
    assert!(train(&model, &data, &TrainConfig::new(Loss::Mse, 1, 0, 0)).is_err());

    let no_val = Dataset::new(data.graphs.clone(), Task::NodeRegression, Split { train: vec![0, 1], val: vec![], test: vec![2] }).unwrap();
    assert!(train(&model, &no_val, &TrainConfig::new(Loss::Mse, 1, 4, 0)).is_err());

    let graphs: Vec<_> = (0..6).map(|s| gen_erdos_renyi(6, 0.5, s).unwrap().with_graph_label(vec![1.0])).collect();
    let graph_task = Dataset::new(graphs, Task::GraphRegression, Split { train: vec![0, 1, 2], val: vec![3], test: vec![4, 5] }).unwrap();
    assert!(train(&model, &graph_task, &TrainConfig::new(Loss::Mse, 1, 4, 0)).is_err());

    let mut fd = TrainConfig::new(Loss::Mse, 1, 4, 0);
    fd.grad_mode = GradMode::FiniteDiff;
    let mut big = counting_spec(1);
    big.hidden = 32;
    let big = big.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(train(&big, &data, &fd).is_err());
}
