//! Invariants of the training loop that hold regardless of model quality.

use std::fs;
use std::path::Path;

use distillkit::backbone::{build_student, build_teacher, StudentConfig, TeacherConfig};
use distillkit::data::{make_synthetic, synthetic_split, Dataset};
use distillkit::nn::Network;
use distillkit::train::{self, train_step, RunPaths, TrainConfig, TrainState};

use crate::Outcome;

pub const CLASSES: usize = 4;

pub fn desk_pair(seed: u64) -> Result<(Network, Network), String> {
    let e = |e: &dyn std::fmt::Display| e.to_string();
    let teacher = build_teacher(&TeacherConfig::desk(CLASSES)).map_err(|x| e(&x))?;
    let student = build_student(&StudentConfig::desk(CLASSES)).map_err(|x| e(&x))?;
    Ok((
        Network::new(teacher, seed).map_err(|x| e(&x))?,
        Network::new(student, seed + 1).map_err(|x| e(&x))?,
    ))
}

pub fn param_bits(net: &Network) -> Vec<u32> {
    net.params.params.iter().flat_map(|p| p.value.iter().map(|v| v.to_bits())).collect()
}

pub fn class_names() -> Vec<String> {
    (0..CLASSES).map(|c| format!("class{c}")).collect()
}

/// 100 distillation steps never touch the teacher, and do move the student.
pub fn check_frozen_teacher() -> Outcome {
    let (teacher, student) = desk_pair(3)?;
    let before = bincode::serialize(&teacher).map_err(|e| e.to_string())?;
    let data = make_synthetic(CLASSES, 8, (32, 32), 5).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let student_before = param_bits(&student);
    let mut state = TrainState::new(student, 0);
    for step in 0..100usize {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % data.len()).collect();
        let batch = data.batch(&idx).map_err(|e| e.to_string())?;
        train_step(&mut state, Some(&teacher), &batch, &cfg, cfg.lr).map_err(|e| e.to_string())?;
    }
    let after = bincode::serialize(&teacher).map_err(|e| e.to_string())?;
    if before != after {
        return Err("teacher bytes changed during distillation".into());
    }
    if param_bits(&state.student) == student_before {
        return Err("student did not move in 100 steps".into());
    }
    Ok(format!("teacher {} bytes identical after 100 steps", before.len()))
}

/// A step at lr = 0 computes gradients but leaves every learnable weight bit
/// for bit unchanged. Batchnorm running statistics are buffers and still
/// advance, as in the usual train-mode forward.
pub fn check_zero_lr() -> Outcome {
    let (teacher, student) = desk_pair(9)?;
    let data = make_synthetic(CLASSES, 4, (32, 32), 1).map_err(|e| e.to_string())?;
    let batch = data.batch(&(0..data.len()).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let before = param_bits(&student);
    let mut state = TrainState::new(student, 0);
    train_step(&mut state, Some(&teacher), &batch, &cfg, 0.0).map_err(|e| e.to_string())?;
    if param_bits(&state.student) != before {
        return Err("weights changed at lr = 0".into());
    }
    let moved = state.velocity.iter().flatten().any(|v| *v != 0.0);
    if !moved {
        return Err("no gradient reached the optimizer".into());
    }
    Ok(format!("{} weights unchanged, gradients nonzero", before.len()))
}

pub fn short_run_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

/// Two fresh runs in separate directories write identical history files.
pub fn check_reproducible_history(a: &Path, b: &Path) -> Outcome {
    let (train_data, test) = synthetic_split(CLASSES, 16, 16, (32, 32), 2).map_err(|e| e.to_string())?;
    let cfg = short_run_config(5, 17);
    let mut files = Vec::new();
    for dir in [a, b] {
        let (teacher, student) = desk_pair(21)?;
        let paths = RunPaths::new(dir);
        train::train(Some(&teacher), student, &train_data, &test, &class_names(), &cfg, Some(&paths))
            .map_err(|e| e.to_string())?;
        files.push(fs::read(paths.history()).map_err(|e| e.to_string())?);
    }
    if files[0] != files[1] {
        return Err("history.csv differs between identical runs".into());
    }
    let rows = String::from_utf8_lossy(&files[0]).lines().count() - 1;
    if rows != 5 {
        return Err(format!("history has {rows} epochs, expected 5"));
    }
    Ok(format!("5-epoch history.csv ({} bytes) identical across runs", files[0].len()))
}
