//! Three-row ablation table: teacher baseline, student without distillation,
//! student with distillation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CHECK: &str = "✓";
pub const CROSS: &str = "×";
pub const HEADER: [&str; 4] = ["G-GhostNet", "DKD", "Params (M)", "Top-1 (%)"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ghost: bool,
    pub dkd: bool,
    pub params: u64,
    /// Test Top-1 in percent, one entry per seed.
    pub top1: Vec<f64>,
}

impl AblationRow {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

fn mark(flag: bool) -> &'static str {
    if flag {
        CHECK
    } else {
        CROSS
    }
}

fn parse_mark(s: &str) -> Result<bool, CliError> {
    match s {
        CHECK => Ok(true),
        CROSS => Ok(false),
        other => Err(CliError::Usage(format!("expected {CHECK} or {CROSS}, got '{other}'"))),
    }
}

/// Text table; Top-1 shows every seed joined by `/`.
pub fn render(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "{:<10}  {:<3}  {:>10}  {} (seeds {})", HEADER[0], HEADER[1], HEADER[2], HEADER[3], seeds.join("/"));
    for r in rows {
        let top1: Vec<String> = r.top1.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(
            out,
            "{:<10}  {:<3}  {:>10.2}  {}",
            mark(r.ghost),
            mark(r.dkd),
            r.params_m(),
            top1.join("/")
        );
    }
    out
}

/// CSV with the same columns, numbers at full precision so the file
/// round-trips exactly.
pub fn to_csv(rows: &[AblationRow]) -> Result<String, CliError> {
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        let top1: Vec<String> = r.top1.iter().map(|v| v.to_string()).collect();
        w.write_record([
            mark(r.ghost).to_string(),
            mark(r.dkd).to_string(),
            r.params_m().to_string(),
            top1.join("/"),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<AblationRow>, CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Usage(e.to_string()))?;
        if rec.len() != 4 {
            return Err(CliError::Usage(format!("expected 4 columns, got {}", rec.len())));
        }
        let params_m: f64 = rec[2]
            .parse()
            .map_err(|e| CliError::Usage(format!("bad params '{}': {e}", &rec[2])))?;
        let params = (params_m * 1e6).round() as u64;
        let top1 = rec[3]
            .split('/')
            .map(|v| v.parse::<f64>().map_err(|e| CliError::Usage(format!("bad Top-1 '{v}': {e}"))))
            .collect::<Result<_, _>>()?;
        rows.push(AblationRow {
            ghost: parse_mark(&rec[0])?,
            dkd: parse_mark(&rec[1])?,
            params,
            top1,
        });
    }
    Ok(rows)
}
