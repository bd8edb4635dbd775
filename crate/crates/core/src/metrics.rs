//! Top-k accuracy, confusion matrices and evaluation reports.
//!
//! Ranking ties go to the lower class index: a label counts as within the
//! top k when fewer than k classes beat it, where class `j` beats the label
//! if its logit is larger, or equal with `j` smaller.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complexity::{self, AnalysisError};
use crate::data::{DataError, Dataset};
use crate::loss::LogitBatch;
use crate::nn::{Network, NnError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("k must be in 1..={classes}, got {k}")]
    K { k: usize, classes: usize },
    #[error("{labels} labels for {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("cannot evaluate an empty dataset")]
    Empty,
    #[error("non-finite logit in evaluation batch starting at sample {0}")]
    NonFinite(usize),
    #[error("csv error: {0}")]
    Csv(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Zero-based rank of `label` within `row` under the tie rule above.
pub fn label_rank(row: &[f64], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

fn check(logits: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<()> {
    let (rows, classes) = logits.dim();
    if k == 0 || k > classes {
        return Err(MetricError::K { k, classes });
    }
    if labels.len() != rows {
        return Err(MetricError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricError::Label { label, classes });
    }
    Ok(())
}

/// Number of rows whose label ranks within the top `k`.
pub fn top_k_hits(logits: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<usize> {
    check(logits, labels, k)?;
    Ok(logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &label)| label_rank(row.as_slice().expect("row-major"), label) < k)
        .count())
}

pub fn top_k_accuracy(logits: &LogitBatch, labels: &[usize], k: usize) -> Result<f64> {
    let hits = top_k_hits(logits.values(), labels, k)?;
    Ok(hits as f64 / logits.batch_size() as f64)
}

/// Counts `[true][predicted]`.
pub fn confusion_matrix(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    check(logits, labels, 1)?;
    let classes = logits.ncols();
    let mut m = vec![vec![0; classes]; classes];
    for (row, &label) in logits.outer_iter().zip(labels) {
        m[label][argmax(row.as_slice().expect("row-major"))] += 1;
    }
    Ok(m)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub n_correct: usize,
    pub n_top5: usize,
    /// k actually used for the "Top-5" column: `min(5, classes)`.
    pub top5_k: usize,
    pub top1: f64,
    pub top5: f64,
    /// Extra diagnostic beyond the Top-1/Top-5 pair.
    pub per_class_top1: BTreeMap<String, f64>,
    pub confusion: Vec<Vec<usize>>,
    pub params: u64,
    pub flops: u64,
}

impl EvalReport {
    /// Build a report from collected logits.
    pub fn from_logits(
        logits: ArrayView2<'_, f64>,
        labels: &[usize],
        class_names: &[String],
        params: u64,
        flops: u64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(MetricError::Empty);
        }
        let k5 = logits.ncols().min(5);
        let n_correct = top_k_hits(logits, labels, 1)?;
        let n_top5 = top_k_hits(logits, labels, k5)?;
        let confusion = confusion_matrix(logits, labels)?;
        let per_class_top1 = confusion
            .iter()
            .enumerate()
            .filter_map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| {
                    let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
                    (name, row[c] as f64 / total as f64)
                })
            })
            .collect();
        let n_total = labels.len();
        Ok(Self {
            n_total,
            n_correct,
            n_top5,
            top5_k: k5,
            top1: n_correct as f64 / n_total as f64,
            top5: n_top5 as f64 / n_total as f64,
            per_class_top1,
            confusion,
            params,
            flops,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, name: &str) -> ReportRow {
        ReportRow {
            name: name.to_string(),
            params_m: self.params as f64 / 1e6,
            flops_m: self.flops as f64 / 1e6,
            top1_pct: self.top1 * 100.0,
            top5_pct: self.top5 * 100.0,
        }
    }

    pub fn to_text(&self, name: &str) -> String {
        let mut out = render_table(&[self.row(name)]);
        let _ = writeln!(
            out,
            "\nN = {}, N_correct = {}, N_top{} = {}",
            self.n_total, self.n_correct, self.top5_k, self.n_top5
        );
        let _ = writeln!(out, "\n[extra] per-class Top-1 (%)");
        let width = self.per_class_top1.keys().map(String::len).max().unwrap_or(5);
        for (class, acc) in &self.per_class_top1 {
            let _ = writeln!(out, "  {class:<width$}  {:>6.2}", acc * 100.0);
        }
        out
    }
}

/// Logits for a whole dataset in index order, evaluated in chunks.
pub fn collect_logits<D: Dataset + ?Sized>(
    net: &Network,
    data: &D,
    batch_size: usize,
) -> Result<(ndarray::Array2<f64>, Vec<usize>)> {
    if data.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = data.len();
    let mut all = ndarray::Array2::<f64>::zeros((n, net.num_classes()));
    let mut labels = Vec::with_capacity(n);
    let step = batch_size.max(1);
    for start in (0..n).step_by(step) {
        let idx: Vec<usize> = (start..(start + step).min(n)).collect();
        let batch = data.batch(&idx)?;
        let logits = net.forward(&batch.images)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite(start));
        }
        all.slice_mut(ndarray::s![start..start + idx.len(), ..])
            .assign(&logits.mapv(f64::from));
        labels.extend(batch.labels);
    }
    Ok((all, labels))
}

/// Evaluate `net` over every sample of `data` and attach complexity figures
/// at `input_hw`.
pub fn evaluate<D: Dataset + ?Sized>(
    net: &Network,
    data: &D,
    class_names: &[String],
    input_hw: (usize, usize),
    batch_size: usize,
) -> Result<EvalReport> {
    let (logits, labels) = collect_logits(net, data, batch_size)?;
    let cost = complexity::analyze(&net.graph, input_hw)?;
    EvalReport::from_logits(logits.view(), &labels, class_names, cost.total_params, cost.total_macs)
}

/// Column headers of comparison tables, in order.
pub const TABLE_HEADER: [&str; 5] = ["Model", "Params (M)", "FLOPs (M)", "Top-1 (%)", "Top-5 (%)"];

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(rename = "Model")]
    pub name: String,
    #[serde(rename = "Params (M)")]
    pub params_m: f64,
    #[serde(rename = "FLOPs (M)")]
    pub flops_m: f64,
    #[serde(rename = "Top-1 (%)")]
    pub top1_pct: f64,
    #[serde(rename = "Top-5 (%)")]
    pub top5_pct: f64,
}

/// Aligned text rendering with two decimals.
pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.name.chars().count())
        .chain([TABLE_HEADER[0].len()])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>10}  {:>10}  {:>9}  {:>9}",
        TABLE_HEADER[0], TABLE_HEADER[1], TABLE_HEADER[2], TABLE_HEADER[3], TABLE_HEADER[4]
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.2}  {:>10.2}  {:>9.2}  {:>9.2}",
            r.name, r.params_m, r.flops_m, r.top1_pct, r.top5_pct
        );
    }
    out
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| MetricError::Csv(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(TABLE_HEADER).map_err(|e| MetricError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| MetricError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| MetricError::Csv(e.to_string()))
}

/// Append one row, writing the header when the file is new or empty.
pub fn append_csv_row(path: &Path, row: &ReportRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MetricError::Csv(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row).map_err(|e| MetricError::Csv(e.to_string()))?;
    w.flush().map_err(|e| MetricError::Csv(e.to_string()))
}
