use std::cell::Cell;
use std::fs;

use distillkit::data::{self, make_synthetic, synthetic_split, Batch, DataError, Dataset, InMemoryDataset};
use distillkit::graph::{LayerGraph, LayerKind};
use distillkit::loss::DistillConfig;
use distillkit::metrics::evaluate;
use distillkit::nn::Network;
use distillkit::train::{
    self, load_checkpoint, pretrain_teacher, save_checkpoint, train_step, RunPaths, TrainConfig, TrainState,
};
use distillkit_oracles::training::{self as oracle, class_names, desk_pair, param_bits, short_run_config};
use ndarray::Array4;

#[test]
fn teacher_stays_frozen() {
    println!("{}", oracle::check_frozen_teacher().unwrap());
}

#[test]
fn zero_lr_is_a_null_update() {
    println!("{}", oracle::check_zero_lr().unwrap());
}

#[test]
fn history_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    println!("{}", oracle::check_reproducible_history(a.path(), b.path()).unwrap());
}

fn graph(nodes: &[(&str, LayerKind, &[&str])]) -> LayerGraph {
    let mut g = LayerGraph::new();
    for (id, kind, inputs) in nodes {
        g.add(*id, kind.clone(), inputs).unwrap();
    }
    g.validate().unwrap();
    g
}

/// input(1) -> gap -> linear 1->2 without bias.
fn two_weight_model() -> LayerGraph {
    graph(&[
        ("input", LayerKind::Input { channels: 1 }, &[]),
        ("gap", LayerKind::AvgPoolGlobal, &["input"]),
        (
            "fc",
            LayerKind::Linear {
                in_features: 1,
                out_features: 2,
                bias: false,
            },
            &["gap"],
        ),
        ("head", LayerKind::SoftmaxHead, &["fc"]),
    ])
}

#[test]
fn zero_distill_weights_reduce_to_plain_sgd() {
    let student = Network::new(two_weight_model(), 4).unwrap();
    let teacher = Network::new(two_weight_model(), 99).unwrap();
    let cfg = TrainConfig {
        lr: 0.3,
        momentum: 0.9,
        weight_decay: 0.01,
        distill: DistillConfig {
            weight_inter: 0.0,
            weight_intra: 0.0,
            ..DistillConfig::default()
        },
        ..TrainConfig::default()
    };
    let means = [0.8f64, -0.5, 0.3, 1.2];
    let labels = vec![0usize, 1, 1, 0];
    let mut images = Array4::<f32>::zeros((4, 1, 2, 2));
    for (i, m) in means.iter().enumerate() {
        images.slice_mut(ndarray::s![i, 0, .., ..]).fill(*m as f32);
    }
    let batch = Batch {
        images,
        labels: labels.clone(),
    };

    let mut w: Vec<f64> = student.params.params[0].value.iter().map(|&v| f64::from(v)).collect();
    let mut v = [0.0f64; 2];
    let mut state = TrainState::new(student, 0);
    for _ in 0..20 {
        let mut g = [0.0f64; 2];
        for (m, &y) in means.iter().zip(&labels) {
            let z = [w[0] * m, w[1] * m];
            let mx = z[0].max(z[1]);
            let e = [(z[0] - mx).exp(), (z[1] - mx).exp()];
            let s = e[0] + e[1];
            for k in 0..2 {
                let target = if k == y { 1.0 } else { 0.0 };
                g[k] += (e[k] / s - target) * m / means.len() as f64;
            }
        }
        for k in 0..2 {
            v[k] = cfg.momentum * v[k] + g[k] + cfg.weight_decay * w[k];
            w[k] -= cfg.lr * v[k];
        }
        let b = train_step(&mut state, Some(&teacher), &batch, &cfg, cfg.lr).unwrap();
        assert_eq!(b.l_kd, 0.0);
    }
    for (got, want) in state.student.params.params[0].value.iter().zip(&w) {
        assert!((f64::from(*got) - want).abs() < 1e-5, "{got} vs {want}");
    }
}

fn bn_free_cnn(c1: usize, c2: usize, classes: usize) -> LayerGraph {
    graph(&[
        ("input", LayerKind::Input { channels: 3 }, &[]),
        ("conv1", LayerKind::conv(3, c1, 3, 1, true), &["input"]),
        ("relu1", LayerKind::Relu, &["conv1"]),
        ("pool", LayerKind::MaxPool { kernel: 2, stride: 2 }, &["relu1"]),
        ("conv2", LayerKind::conv(c1, c2, 3, 1, true), &["pool"]),
        ("relu2", LayerKind::Relu, &["conv2"]),
        ("gap", LayerKind::AvgPoolGlobal, &["relu2"]),
        (
            "fc",
            LayerKind::Linear {
                in_features: c2,
                out_features: classes,
                bias: true,
            },
            &["gap"],
        ),
        ("head", LayerKind::SoftmaxHead, &["fc"]),
    ])
}

#[test]
fn self_distillation_has_zero_loss_and_no_update() {
    let student = Network::new(bn_free_cnn(8, 16, 4), 1).unwrap();
    let teacher = student.clone();
    let data = make_synthetic(4, 4, (16, 16), 2).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        distill: DistillConfig {
            weight_task: 0.0,
            ..DistillConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(student, 0);
    for step in 0..10 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % data.len()).collect();
        let b = train_step(&mut state, Some(&teacher), &data.batch(&idx).unwrap(), &cfg, cfg.lr).unwrap();
        assert!(b.l_kd.abs() < 1e-9, "step {step}: l_kd {}", b.l_kd);
    }
    for (a, b) in state.student.params.params.iter().zip(&teacher.params.params) {
        for (x, y) in a.value.iter().zip(&b.value) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn small_cnn_fits_its_training_set() {
    let data = make_synthetic(4, 50, (32, 32), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        lr: 0.05,
        distill_enabled: false,
        ..TrainConfig::default()
    };
    let net = Network::new(bn_free_cnn(16, 32, 4), 3).unwrap();
    let out = train::train(None, net, &data, &data, &class_names(), &cfg, None).unwrap();
    let acc = evaluate(&out.state.student, &data, &class_names(), (32, 32), 64).unwrap().top1;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn checkpointed_state_roundtrips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (teacher, student) = desk_pair(5).unwrap();
    let data = make_synthetic(4, 4, (32, 32), 0).unwrap();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(student, 3);
    let batch = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    train_step(&mut state, Some(&teacher), &batch, &cfg, cfg.lr).unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&path, "h", &state).unwrap();
    let (hash, mut back): (String, TrainState) = load_checkpoint(&path).unwrap();
    assert_eq!(hash, "h");
    assert_eq!(bincode::serialize(&back).unwrap(), bincode::serialize(&state).unwrap());
    // Both copies continue identically, including the rng stream.
    for s in [&mut state, &mut back] {
        train_step(s, Some(&teacher), &batch, &cfg, cfg.lr).unwrap();
    }
    assert_eq!(param_bits(&back.student), param_bits(&state.student));
    use rand::Rng;
    assert_eq!(state.rng.gen::<u64>(), back.rng.gen::<u64>());
}

/// Fails on the `fail_at`-th batch request, like a crash mid-epoch.
struct Flaky<'a> {
    inner: &'a InMemoryDataset,
    calls: Cell<usize>,
    fail_at: usize,
}

impl Dataset for Flaky<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn batch(&self, indices: &[usize]) -> data::Result<Batch> {
        let n = self.calls.get();
        self.calls.set(n + 1);
        if n == self.fail_at {
            return Err(DataError::Argument("simulated crash".into()));
        }
        self.inner.batch(indices)
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_history() {
    let (train_data, test) = synthetic_split(4, 16, 16, (32, 32), 2).unwrap();
    let cfg = short_run_config(5, 17);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (RunPaths::new(a.path()), RunPaths::new(b.path()));
    let run = |paths: &RunPaths, data: &dyn Dataset| {
        let (teacher, student) = desk_pair(21).unwrap();
        train::train(Some(&teacher), student, data, &test, &class_names(), &cfg, Some(paths))
    };
    run(&pa, &train_data).unwrap();
    let flaky = Flaky {
        inner: &train_data,
        calls: Cell::new(0),
        fail_at: 10,
    };
    assert!(run(&pb, &flaky).is_err());
    let partial: TrainState = load_checkpoint(&pb.last_checkpoint()).unwrap().1;
    assert_eq!(partial.epoch, 2);
    run(&pb, &train_data).unwrap();
    assert_eq!(fs::read(pa.history()).unwrap(), fs::read(pb.history()).unwrap());
    assert_eq!(fs::read(pa.best_checkpoint()).unwrap(), fs::read(pb.best_checkpoint()).unwrap());
}

#[test]
fn reloaded_teacher_scores_the_same() {
    let (train_data, test) = synthetic_split(4, 16, 16, (32, 32), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(dir.path());
    let (teacher, _) = desk_pair(2).unwrap();
    let out = pretrain_teacher(teacher, &train_data, &test, &class_names(), &short_run_config(3, 1), Some(&paths)).unwrap();
    let (_, reloaded): (String, Network) = load_checkpoint(&paths.best_checkpoint()).unwrap();
    assert_eq!(reloaded, out.best);
    let a = evaluate(&out.best, &test, &class_names(), (32, 32), 7).unwrap();
    let b = evaluate(&reloaded, &test, &class_names(), (32, 32), 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn disabled_distillation_logs_zero_kd() {
    let (train_data, test) = synthetic_split(4, 8, 8, (32, 32), 3).unwrap();
    let (teacher, student) = desk_pair(4).unwrap();
    let cfg = TrainConfig {
        distill_enabled: false,
        ..short_run_config(2, 0)
    };
    let out = train::train(Some(&teacher), student, &train_data, &test, &class_names(), &cfg, None).unwrap();
    assert_eq!(out.state.history.len(), 2);
    for h in &out.state.history {
        assert_eq!((h.l_inter, h.l_intra, h.l_kd), (0.0, 0.0, 0.0));
        assert!(h.l_total.is_finite() && h.l_total == h.l_task);
    }
}
