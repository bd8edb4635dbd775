//! Independent reference implementations used by the test suites.
//!
//! Each `check_*` function returns `Ok(summary)` or `Err(reason)`, so the
//! same code backs the integration tests and the acceptance report.

pub mod counting;
pub mod loss;
pub mod split;
pub mod stage;
pub mod topk;
pub mod training;

pub type Outcome = Result<String, String>;

/// `|a - b| <= tol * max(1, |a|, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
