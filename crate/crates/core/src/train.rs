//! SGD training of a student against a frozen teacher.
//!
//! The update is `v <- m * v + g + wd * w`, then `w <- w - lr * v`, with
//! weight decay on conv and linear weights only. The learning rate follows a
//! per-epoch cosine from `lr` down to `lr_min`.
//!
//! Checkpoints are a small container: an 8-byte magic, a little-endian `u32`
//! format version, a length-prefixed config hash, then a bincode payload.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{hflip, Batch, DataError, Dataset};
use crate::loss::{self, DistillConfig, LogitBatch, LossBreakdown, LossError};
use crate::metrics::{self, EvalReport, MetricError};
use crate::nn::{Network, NnError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DKDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch_index} (step {step}): {stats}"
    )]
    NonFinite {
        epoch: usize,
        batch_index: usize,
        step: u64,
        stats: LogitStats,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("teacher has {teacher} classes, student has {student}")]
    ClassMismatch { teacher: usize, student: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io error at {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Summary of a logit tensor, attached to non-finite aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub non_finite: usize,
}

impl LogitStats {
    pub fn of(values: &Array2<f32>) -> Self {
        let finite: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().map(|&v| f64::from(v)).sum::<f64>() / finite.len() as f64
        };
        Self {
            min: finite.iter().copied().fold(f32::INFINITY, f32::min),
            max: finite.iter().copied().fold(f32::NEG_INFINITY, f32::max),
            mean,
            non_finite: values.len() - finite.len(),
        }
    }
}

impl std::fmt::Display for LogitStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "student logits min {} max {} mean {} non-finite {}",
            self.min, self.max, self.mean, self.non_finite
        )
    }
}

/// Compute backend. Only the built-in CPU executor exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Cpu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Use the teacher and the distillation terms. When false, or when no
    /// teacher is given, the objective is plain cross-entropy.
    pub distill_enabled: bool,
    pub distill: DistillConfig,
    pub hflip: bool,
    pub eval_batch_size: usize,
    pub backend: Backend,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 0.01,
            lr_min: 1e-4,
            momentum: 0.937,
            weight_decay: 0.00005,
            seed: 0,
            distill_enabled: true,
            distill: DistillConfig::default(),
            hflip: false,
            eval_batch_size: 64,
            backend: Backend::Cpu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        // lr = 0 is allowed as a null update.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0) {
            return fail(format!("lr_min must be finite and >= 0, got {}", self.lr_min));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.distill.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let floor = self.lr_min.min(self.lr);
        let progress = (epoch as f64 / self.epochs as f64).min(1.0);
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Per-epoch record; mean losses over the epoch's steps plus test accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_kd: f64,
    pub l_total: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EpochRecord {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            l_task: self.l_task,
            l_inter: self.l_inter,
            l_intra: self.l_intra,
            l_kd: self.l_kd,
            l_total: self.l_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub student: Network,
    pub velocity: Vec<Vec<f32>>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<LossBreakdown>,
    pub best_top1: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(student: Network, seed: u64) -> Self {
        let velocity = student.params.zeros_like();
        Self {
            epoch: 0,
            step: 0,
            student,
            velocity,
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
            step_losses: Vec::new(),
            best_top1: None,
            best_epoch: None,
        }
    }
}

/// One SGD step. The teacher only runs inference.
pub fn train_step(
    state: &mut TrainState,
    teacher: Option<&Network>,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let batch_index = state.step_losses.len();
    let (logits, tape) = state.student.forward_train(&batch.images)?;
    let non_finite = |state: &TrainState| TrainError::NonFinite {
        epoch: state.epoch,
        batch_index,
        step: state.step,
        stats: LogitStats::of(&logits),
    };
    let student_logits = match LogitBatch::from_f32(logits.view()) {
        Ok(l) => l,
        Err(LossError::NonFinite { .. }) => return Err(non_finite(state)),
        Err(e) => return Err(e.into()),
    };
    let (breakdown, grad) = match teacher.filter(|_| cfg.distill_enabled) {
        Some(t) => {
            let teacher_logits = LogitBatch::from_f32(t.forward(&batch.images)?.view())?;
            loss::total_loss_with_grad(&teacher_logits, &student_logits, &batch.labels, &cfg.distill)?
        }
        None => loss::task_loss_with_grad(&student_logits, &batch.labels)?,
    };
    if !breakdown.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(non_finite(state));
    }
    let grad32 = grad.mapv(|v| v as f32);
    let grads = state.student.backward(&tape, grad32.view())?;
    let (lr, m, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    for ((param, g), v) in state
        .student
        .params
        .params
        .iter_mut()
        .zip(&grads)
        .zip(state.velocity.iter_mut())
    {
        let decay = if param.decay { wd } else { 0.0 };
        for ((w, &gi), vi) in param.value.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi + gi + decay * *w;
            *w -= lr * *vi;
        }
    }
    state.step += 1;
    state.step_losses.push(breakdown);
    Ok(breakdown)
}

/// Output locations of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }
}

/// Stable hash of everything that determines a run.
pub fn config_hash(cfg: &TrainConfig, student: &Network, teacher: Option<&Network>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(student.graph.to_text().as_bytes());
    // The initial weights are part of the run identity.
    h.update(bincode::serialize(&student.params).expect("params serialize"));
    if let Some(t) = teacher.filter(|_| cfg.distill_enabled) {
        h.update(t.graph.to_text().as_bytes());
        h.update(bincode::serialize(&t.params).expect("params serialize"));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let io = |e: String| TrainError::Io {
        path: path.to_path_buf(),
        detail: e,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    if history.is_empty() {
        w.write_record(["epoch", "l_task", "l_inter", "l_intra", "l_kd", "l_total", "top1", "top5"])
            .map_err(|e| io(e.to_string()))?;
    }
    for r in history {
        w.serialize(r).map_err(|e| io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| io(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| TrainError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn save_checkpoint<T: Serialize>(path: &Path, config_hash: &str, payload: &T) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_hash.as_bytes());
    bincode::serialize_into(&mut bytes, payload).map_err(|e| TrainError::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

/// Load a checkpoint and return `(config_hash, payload)`.
pub fn load_checkpoint<T: DeserializeOwned>(path: &Path) -> Result<(String, T)> {
    let fail = |detail: String| TrainError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let hash_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = 16 + hash_len;
    if bytes.len() < body {
        return Err(fail("truncated header".into()));
    }
    let hash = String::from_utf8(bytes[16..body].to_vec()).map_err(|e| fail(e.to_string()))?;
    let payload = bincode::deserialize(&bytes[body..]).map_err(|e| match *e {
        bincode::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            fail("payload is truncated or was written by an incompatible build".into())
        }
        other => fail(format!("cannot decode payload: {other}")),
    })?;
    Ok((hash, payload))
}

fn mean_losses(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut acc = LossBreakdown::default();
    for s in steps {
        acc.l_task += s.l_task;
        acc.l_inter += s.l_inter;
        acc.l_intra += s.l_intra;
        acc.l_kd += s.l_kd;
        acc.l_total += s.l_total;
    }
    LossBreakdown {
        l_task: acc.l_task / n,
        l_inter: acc.l_inter / n,
        l_intra: acc.l_intra / n,
        l_kd: acc.l_kd / n,
        l_total: acc.l_total / n,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Student weights at the best test Top-1 epoch.
    pub best: Network,
    pub final_report: EvalReport,
}

/// Run the full schedule, evaluating on `test` after every epoch.
///
/// With `paths`, the state is checkpointed after each epoch and an existing
/// `last.ckpt` with a matching config hash is resumed.
pub fn train<D1: Dataset + ?Sized, D2: Dataset + ?Sized>(
    teacher: Option<&Network>,
    student: Network,
    train_data: &D1,
    test: &D2,
    class_names: &[String],
    cfg: &TrainConfig,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(t) = teacher.filter(|_| cfg.distill_enabled) {
        if t.num_classes() != student.num_classes() {
            return Err(TrainError::ClassMismatch {
                teacher: t.num_classes(),
                student: student.num_classes(),
            });
        }
    }
    let hash = config_hash(cfg, &student, teacher);
    let mut best = student.clone();
    let mut state = TrainState::new(student, cfg.seed);
    if let Some(p) = paths {
        fs::create_dir_all(&p.dir).map_err(|e| TrainError::Io {
            path: p.dir.clone(),
            detail: e.to_string(),
        })?;
        if p.last_checkpoint().exists() {
            match load_checkpoint::<TrainState>(&p.last_checkpoint()) {
                Ok((h, saved)) if h == hash => {
                    log::info!("resuming from epoch {}", saved.epoch);
                    state = saved;
                    if p.best_checkpoint().exists() {
                        best = load_checkpoint::<Network>(&p.best_checkpoint())?.1;
                    }
                }
                Ok(_) => log::warn!("ignoring checkpoint with a different config hash"),
                Err(e) => log::warn!("ignoring unreadable checkpoint: {e}"),
            }
        }
    }
    let input_hw = {
        let probe = test.batch(&[0])?;
        let (_, _, h, w) = probe.images.dim();
        (h, w)
    };
    let mut last_report = None;
    while state.epoch < cfg.epochs {
        let lr = cfg.lr_at(state.epoch);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut state.rng);
        state.step_losses.clear();
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train_data.batch(chunk)?;
            if cfg.hflip {
                let which: Vec<bool> = (0..chunk.len()).map(|_| state.rng.gen_bool(0.5)).collect();
                hflip(&mut batch.images, &which);
            }
            if let Err(e) = train_step(&mut state, teacher, &batch, cfg, lr) {
                if let TrainError::NonFinite { .. } = e {
                    log::error!("{e}; batch sample indices {chunk:?}");
                }
                return Err(e);
            }
        }
        let report = metrics::evaluate(&state.student, test, class_names, input_hw, cfg.eval_batch_size)?;
        let losses = mean_losses(&state.step_losses);
        let epoch = state.epoch;
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            l_task: losses.l_task,
            l_inter: losses.l_inter,
            l_intra: losses.l_intra,
            l_kd: losses.l_kd,
            l_total: losses.l_total,
            top1: report.top1,
            top5: report.top5,
        });
        state.epoch += 1;
        log::info!(
            "epoch {}/{} lr {lr:.5} loss {:.4} top1 {:.4} top5 {:.4}",
            state.epoch,
            cfg.epochs,
            losses.l_total,
            report.top1,
            report.top5
        );
        let improved = state.best_top1.is_none_or(|b| report.top1 > b);
        if improved {
            state.best_top1 = Some(report.top1);
            state.best_epoch = Some(state.epoch);
            best = state.student.clone();
        }
        if let Some(p) = paths {
            if improved {
                save_checkpoint(&p.best_checkpoint(), &hash, &best)?;
            }
            save_checkpoint(&p.last_checkpoint(), &hash, &state)?;
            write_history(&p.history(), &state.history)?;
        }
        last_report = Some(report);
    }
    let final_report = match last_report {
        Some(r) => r,
        None => metrics::evaluate(&state.student, test, class_names, input_hw, cfg.eval_batch_size)?,
    };
    if let Some(p) = paths {
        write_history(&p.history(), &state.history)?;
    }
    Ok(TrainOutcome {
        state,
        best,
        final_report,
    })
}

/// Train a teacher with the same loop and distillation disabled.
pub fn pretrain_teacher<D1: Dataset + ?Sized, D2: Dataset + ?Sized>(
    teacher: Network,
    train_data: &D1,
    test: &D2,
    class_names: &[String],
    cfg: &TrainConfig,
    paths: Option<&RunPaths>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        distill_enabled: false,
        ..cfg.clone()
    };
    train(None, teacher, train_data, test, class_names, &cfg, paths)
}
