//! Tempered-softmax distillation losses.
//!
//! Every loss here is a pure function of a teacher [`LogitBatch`], a student
//! [`LogitBatch`] and a [`DistillConfig`]. Gradients are only ever produced
//! for the student logits; the teacher is a constant.
//!
//! Two decompositions of the distillation signal are available:
//!
//! * [`DistillVariant::RowColumn`]: a row-wise KL over classes per sample
//!   (`l_inter`) plus a column-wise KL over the batch per class (`l_intra`).
//! * [`DistillVariant::TargetNonTarget`]: a binary target/rest KL
//!   (`l_inter` slot) plus a KL over the renormalized non-target classes
//!   (`l_intra` slot).

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities inside log ratios so that losses stay finite.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("non-finite logit {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("logit batch needs at least 1 row and 2 columns, got {rows}x{cols}")]
    Degenerate { rows: usize, cols: usize },
    #[error("teacher logits are {teacher:?} but student logits are {student:?}")]
    ShapeMismatch {
        teacher: (usize, usize),
        student: (usize, usize),
    },
    #[error("{labels} labels supplied for a batch of {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid distillation config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A `B x N` matrix of classifier outputs: rows are samples, columns classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    values: Array2<f64>,
}

impl LogitBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (rows, cols) = values.dim();
        if rows < 1 || cols < 2 {
            return Err(LossError::Degenerate { rows, cols });
        }
        for ((row, col), &value) in values.indexed_iter() {
            if !value.is_finite() {
                return Err(LossError::NonFinite { row, col, value });
            }
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LossError::Degenerate {
                rows: rows.len(),
                cols: 0,
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), cols), flat)
            .map_err(|_| LossError::Degenerate { rows: rows.len(), cols })?;
        Self::new(values)
    }

    pub fn from_f32(values: ArrayView2<'_, f32>) -> Result<Self> {
        Self::new(values.mapv(f64::from))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Which axis of a [`ProbBatch`] is a probability distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each row (one sample, all classes) sums to one.
    Row,
    /// Each column (one class, all samples) sums to one.
    Column,
}

impl SoftmaxAxis {
    fn lane_axis(self) -> Axis {
        match self {
            SoftmaxAxis::Row => Axis(1),
            SoftmaxAxis::Column => Axis(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    values: Array2<f64>,
    axis: SoftmaxAxis,
}

impl ProbBatch {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn axis(&self) -> SoftmaxAxis {
        self.axis
    }

    /// The `index`-th distribution along the stochastic axis.
    pub fn slice(&self, index: usize) -> ArrayView1<'_, f64> {
        match self.axis {
            SoftmaxAxis::Row => self.values.row(index),
            SoftmaxAxis::Column => self.values.column(index),
        }
    }

    pub fn num_slices(&self) -> usize {
        match self.axis {
            SoftmaxAxis::Row => self.values.nrows(),
            SoftmaxAxis::Column => self.values.ncols(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillVariant {
    #[default]
    RowColumn,
    TargetNonTarget,
}

/// Temperature and term weights for the distillation objective.
///
/// `weight_task` scales the cross-entropy term; it defaults to 1 so that
/// `l_total = l_task + l_kd`. Setting it to 0 gives a distill-only objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    pub weight_inter: f64,
    pub weight_intra: f64,
    pub weight_task: f64,
    pub variant: DistillVariant,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            weight_inter: 1.0,
            weight_intra: 1.0,
            weight_task: 1.0,
            variant: DistillVariant::RowColumn,
        }
    }
}

impl DistillConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        let weights = [
            ("weight_inter", self.weight_inter),
            ("weight_intra", self.weight_intra),
            ("weight_task", self.weight_task),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::Config(format!(
                    "{name} must be a nonnegative finite number, got {w}"
                )));
            }
        }
        if weights.iter().all(|&(_, w)| w == 0.0) {
            return Err(LossError::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_kd: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_task, self.l_inter, self.l_intra, self.l_kd, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(LossError::Temperature(t))
    }
}

fn check_pair(teacher: &LogitBatch, student: &LogitBatch) -> Result<()> {
    if teacher.dim() != student.dim() {
        return Err(LossError::ShapeMismatch {
            teacher: teacher.dim(),
            student: student.dim(),
        });
    }
    Ok(())
}

fn check_labels(logits: &LogitBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.batch_size() {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            batch: logits.batch_size(),
        });
    }
    let classes = logits.num_classes();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::LabelOutOfRange {
            row,
            label,
            classes,
        });
    }
    Ok(())
}

fn softmax_lanes(values: &mut Array2<f64>, axis: Axis) {
    for mut lane in values.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
}

/// Softmax of `logits / t` along `axis`, computed with max subtraction.
pub fn temp_softmax(logits: &LogitBatch, t: f64, axis: SoftmaxAxis) -> Result<ProbBatch> {
    check_temperature(t)?;
    let mut values = logits.values.mapv(|v| v / t);
    softmax_lanes(&mut values, axis.lane_axis());
    Ok(ProbBatch { values, axis })
}

/// `KL(p || q) = sum_j p_j ln(p_j / q_j)`.
///
/// Terms with `p_j = 0` contribute nothing. `q_j` is floored at
/// [`PROB_EPSILON`] so the result is always finite.
pub fn kl_divergence(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LossError::LengthMismatch(p.len(), q.len()));
    }
    Ok(kl_unchecked(p.iter().copied(), q.iter().copied()))
}

fn kl_unchecked(p: impl Iterator<Item = f64>, q: impl Iterator<Item = f64>) -> f64 {
    let kl: f64 = p
        .zip(q)
        .filter(|&(pj, _)| pj > 0.0)
        .map(|(pj, qj)| pj * (pj.ln() - qj.max(PROB_EPSILON).ln()))
        .sum();
    kl.max(0.0)
}

#[derive(Debug, Clone)]
struct Graded {
    value: f64,
    grad: Array2<f64>,
}

/// `(t^2 / lanes) * sum over lanes of KL(teacher lane || student lane)`.
///
/// The gradient of the KL over one lane with respect to the student logits of
/// that lane is `(q - p) / t`.
fn lane_kl(teacher: &LogitBatch, student: &LogitBatch, t: f64, axis: SoftmaxAxis) -> Result<Graded> {
    check_pair(teacher, student)?;
    let p = temp_softmax(teacher, t, axis)?;
    let q = temp_softmax(student, t, axis)?;
    let lanes = p.num_slices();
    let total: f64 = (0..lanes)
        .map(|i| kl_unchecked(p.slice(i).iter().copied(), q.slice(i).iter().copied()))
        .sum();
    let scale = t * t / lanes as f64;
    let grad = (&q.values - &p.values) * (t / lanes as f64);
    Ok(Graded {
        value: scale * total,
        grad,
    })
}

/// Classic row-wise distillation loss `(T^2/B) * sum_i KL(p_i || q_i)`.
pub fn kd_loss_rowwise(teacher: &LogitBatch, student: &LogitBatch, t: f64) -> Result<f64> {
    check_pair(teacher, student)?;
    let p = temp_softmax(teacher, t, SoftmaxAxis::Row)?;
    let q = temp_softmax(student, t, SoftmaxAxis::Row)?;
    let sum: f64 = p
        .values
        .outer_iter()
        .zip(q.values.outer_iter())
        .map(|(pi, qi)| kl_unchecked(pi.iter().copied(), qi.iter().copied()))
        .sum();
    Ok(t * t * sum / teacher.batch_size() as f64)
}

/// Inter-class term: KL across classes for every sample, averaged over the batch.
pub fn inter_class_loss(teacher: &LogitBatch, student: &LogitBatch, t: f64) -> Result<f64> {
    Ok(lane_kl(teacher, student, t, SoftmaxAxis::Row)?.value)
}

static WARNED_SINGLE_ROW: AtomicBool = AtomicBool::new(false);
static WARNED_TWO_CLASS: AtomicBool = AtomicBool::new(false);

fn warn_once(flag: &AtomicBool, message: &str) {
    if !flag.swap(true, Ordering::Relaxed) {
        log::warn!("{message}");
    }
}

fn intra_graded(teacher: &LogitBatch, student: &LogitBatch, t: f64) -> Result<Graded> {
    if teacher.batch_size() == 1 {
        warn_once(
            &WARNED_SINGLE_ROW,
            "intra-class loss on a batch of one sample is identically zero",
        );
    }
    lane_kl(teacher, student, t, SoftmaxAxis::Column)
}

/// Intra-class term: tempered softmax over the batch axis per class, KL per
/// class column, averaged over classes. A single-sample batch yields 0.
pub fn intra_class_loss(teacher: &LogitBatch, student: &LogitBatch, t: f64) -> Result<f64> {
    Ok(intra_graded(teacher, student, t)?.value)
}

fn row_column_graded(
    teacher: &LogitBatch,
    student: &LogitBatch,
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    cfg.validate()?;
    let inter = lane_kl(teacher, student, cfg.temperature, SoftmaxAxis::Row)?;
    let intra = intra_graded(teacher, student, cfg.temperature)?;
    let l_kd = cfg.weight_inter * inter.value + cfg.weight_intra * intra.value;
    let grad = inter.grad * cfg.weight_inter + intra.grad * cfg.weight_intra;
    let breakdown = LossBreakdown {
        l_task: 0.0,
        l_inter: inter.value,
        l_intra: intra.value,
        l_kd,
        l_total: l_kd,
    };
    Ok((breakdown, grad))
}

/// Weighted sum of [`inter_class_loss`] and [`intra_class_loss`].
///
/// Only the task-free part of the breakdown is filled: `l_task = 0` and
/// `l_total = l_kd`. Requires the row/column variant.
pub fn total_kd_loss(
    teacher: &LogitBatch,
    student: &LogitBatch,
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    if cfg.variant != DistillVariant::RowColumn {
        return Err(LossError::Config(
            "the target/non-target variant needs labels; use target_nontarget_loss".into(),
        ));
    }
    Ok(row_column_graded(teacher, student, cfg)?.0)
}

struct TargetSplit {
    /// Tempered probability of the labelled class.
    target: f64,
    /// Sum of the tempered probabilities of every other class.
    rest: f64,
    /// Non-target probabilities renormalized to sum to 1 (label slot is 0).
    non_target: Vec<f64>,
}

fn split_row(row: ArrayView1<'_, f64>, label: usize) -> TargetSplit {
    let target = row[label];
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .sum();
    // Renormalizing via a softmax restricted to the non-target logits would be
    // equivalent; dividing by `rest` keeps a single softmax pass.
    let non_target = row
        .iter()
        .enumerate()
        .map(|(j, &v)| if j == label { 0.0 } else { v / rest.max(f64::MIN_POSITIVE) })
        .collect();
    TargetSplit {
        target,
        rest,
        non_target,
    }
}

fn target_nontarget_graded(
    teacher: &LogitBatch,
    student: &LogitBatch,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    check_labels(student, labels)?;
    let (batch, classes) = student.dim();
    if classes == 2 {
        warn_once(
            &WARNED_TWO_CLASS,
            "non-target distribution has a single class; its KL term is identically zero",
        );
    }
    let t = cfg.temperature;
    let p = temp_softmax(teacher, t, SoftmaxAxis::Row)?;
    let q = temp_softmax(student, t, SoftmaxAxis::Row)?;
    let mut binary_sum = 0.0;
    let mut non_target_sum = 0.0;
    let mut grad = Array2::<f64>::zeros((batch, classes));
    let scale = t / batch as f64;
    for (i, &label) in labels.iter().enumerate() {
        let ps = split_row(p.values.row(i), label);
        let qs = split_row(q.values.row(i), label);
        binary_sum += kl_unchecked([ps.target, ps.rest].into_iter(), [qs.target, qs.rest].into_iter());
        non_target_sum += kl_unchecked(
            ps.non_target.iter().copied(),
            qs.non_target.iter().copied(),
        );
        // d/dz of the binary KL: (x - a)/t at the label, q_hat*(a - x)/t elsewhere.
        // d/dz of the non-target KL: (q_hat - p_hat)/t off the label, 0 at it.
        let a = ps.target;
        let x = qs.target;
        let mut row = grad.row_mut(i);
        for j in 0..classes {
            if j == label {
                row[j] = cfg.weight_inter * (x - a) * scale;
            } else {
                let q_hat = qs.non_target[j];
                let p_hat = ps.non_target[j];
                row[j] = (cfg.weight_inter * q_hat * (a - x)
                    + cfg.weight_intra * (q_hat - p_hat))
                    * scale;
            }
        }
    }
    let l_inter = t * t * binary_sum / batch as f64;
    let l_intra = t * t * non_target_sum / batch as f64;
    let l_kd = cfg.weight_inter * l_inter + cfg.weight_intra * l_intra;
    let breakdown = LossBreakdown {
        l_task: 0.0,
        l_inter,
        l_intra,
        l_kd,
        l_total: l_kd,
    };
    Ok((breakdown, grad))
}

/// Target/non-target decomposition.
///
/// The `l_inter` slot holds `KL([p_t, 1-p_t] || [q_t, 1-q_t])` where `p_t`,
/// `q_t` are the tempered probabilities of the labelled class; the `l_intra`
/// slot holds the KL between the non-target distributions renormalized to sum
/// to one. Both are averaged over the batch and scaled by `T^2`.
/// `l_task` is left at 0 and `l_total = l_kd`.
pub fn target_nontarget_loss(
    teacher: &LogitBatch,
    student: &LogitBatch,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    Ok(target_nontarget_graded(teacher, student, labels, cfg)?.0)
}

/// Mean cross-entropy of the student logits against hard labels, with its
/// gradient `(softmax(z) - onehot) / B`.
fn cross_entropy_graded(student: &LogitBatch, labels: &[usize]) -> Result<Graded> {
    check_labels(student, labels)?;
    let batch = student.batch_size() as f64;
    let mut probs = student.values.clone();
    softmax_lanes(&mut probs, Axis(1));
    let mut value = 0.0;
    for (row, &label) in student.values.outer_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        value += lse - row[label];
    }
    let mut grad = probs;
    for (i, &label) in labels.iter().enumerate() {
        grad[[i, label]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / batch);
    Ok(Graded {
        value: value / batch,
        grad,
    })
}

/// Mean cross-entropy at temperature 1.
pub fn cross_entropy(student: &LogitBatch, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_graded(student, labels)?.value)
}

/// Full objective `weight_task * l_task + l_kd` using the configured variant.
pub fn total_loss(
    teacher: &LogitBatch,
    student: &LogitBatch,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(teacher, student, labels, cfg)?.0)
}

/// [`total_loss`] together with its gradient with respect to the student
/// logits. There is no teacher gradient.
pub fn total_loss_with_grad(
    teacher: &LogitBatch,
    student: &LogitBatch,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(LossBreakdown, Array2<f64>)> {
    cfg.validate()?;
    check_pair(teacher, student)?;
    let task = cross_entropy_graded(student, labels)?;
    let skip_kd = cfg.weight_inter == 0.0 && cfg.weight_intra == 0.0;
    let (mut breakdown, kd_grad) = if skip_kd {
        (LossBreakdown::default(), None)
    } else {
        let (b, g) = match cfg.variant {
            DistillVariant::RowColumn => row_column_graded(teacher, student, cfg)?,
            DistillVariant::TargetNonTarget => {
                target_nontarget_graded(teacher, student, labels, cfg)?
            }
        };
        (b, Some(g))
    };
    breakdown.l_task = task.value;
    breakdown.l_total = cfg.weight_task * task.value + breakdown.l_kd;
    let mut grad = task.grad * cfg.weight_task;
    if let Some(g) = kd_grad {
        grad += &g;
    }
    Ok((breakdown, grad))
}

/// Cross-entropy only objective, used when no teacher is present.
pub fn task_loss_with_grad(
    student: &LogitBatch,
    labels: &[usize],
) -> Result<(LossBreakdown, Array2<f64>)> {
    let task = cross_entropy_graded(student, labels)?;
    let breakdown = LossBreakdown {
        l_task: task.value,
        l_total: task.value,
        ..LossBreakdown::default()
    };
    Ok((breakdown, task.grad))
}
