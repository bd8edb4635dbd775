//! Closed-form parameter counts of a G-Ghost stage and of its plain
//! counterpart, derived from the architecture rather than from a graph.

use distillkit::backbone::{build_gghost_stage, GGhostStageSpec};
use distillkit::complexity::{count_params, reduction_ratios, StageCostSymbols};

use crate::Outcome;

pub const LAMBDAS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
pub const BLOCKS: [usize; 4] = [2, 3, 4, 6];
pub const RATIO_TOLERANCE: f64 = 0.05;
pub const CHANNELS: usize = 64;

/// 3x3 conv without bias followed by batchnorm.
fn block(cin: usize, cout: usize) -> u64 {
    (9 * cin * cout + 2 * cout) as u64
}

pub fn complex_width(c: usize, lambda: f64) -> usize {
    (((1.0 - lambda) * c as f64) - 1e-9).ceil() as usize
}

/// Per-block parameters of the plain stage.
pub fn plain_blocks(n: usize, cin: usize, c: usize) -> Vec<u64> {
    (1..=n).map(|i| if i == 1 { block(cin, c) } else { block(c, c) }).collect()
}

/// `(complex blocks, cheap branch + mix path)` of the ghost stage.
pub fn ghost_parts(n: usize, lambda: f64, cin: usize, c: usize) -> (u64, u64) {
    let cc = complex_width(c, lambda);
    let g = c - cc;
    let complex: u64 = block(cin, c)
        + (2..=n)
            .map(|i| if i == 2 { block(c, cc) } else { block(cc, cc) })
            .sum::<u64>();
    if g == 0 {
        return (complex, 0);
    }
    // pw C->G, bn, dw 3x3, bn; mix: pw C'->G with bias.
    let cheap = (c * g + 2 * g + 9 * g + 2 * g + cc * g + g) as u64;
    (complex, cheap)
}

/// The cost model written out directly.
pub fn model_ratio(costs: &[f64], lambda: f64, mix: f64) -> f64 {
    let keep = 1.0 - lambda;
    let mut denom = costs[0] + keep * costs[1] + mix;
    for c in &costs[2..] {
        denom += keep * keep * c;
    }
    costs.iter().sum::<f64>() / denom
}

pub struct StageRow {
    pub n: usize,
    pub lambda: f64,
    pub empirical: f64,
    pub model: f64,
}

/// Build every stage of the grid, check the counts against the closed forms
/// and the measured ratio against the cost model.
pub fn stage_rows() -> Result<Vec<StageRow>, String> {
    let mut rows = Vec::new();
    for &lambda in &LAMBDAS {
        for &n in &BLOCKS {
            let spec = GGhostStageSpec::new(n, lambda, CHANNELS, CHANNELS, 1);
            let ghost = build_gghost_stage(&spec).map_err(|e| e.to_string())?;
            let plain = build_gghost_stage(&spec.plain()).map_err(|e| e.to_string())?;
            let counted_ghost = count_params(&ghost).map_err(|e| e.to_string())?;
            let counted_plain = count_params(&plain).map_err(|e| e.to_string())?;

            let blocks = plain_blocks(n, CHANNELS, CHANNELS);
            let (complex, cheap) = ghost_parts(n, lambda, CHANNELS, CHANNELS);
            let want_plain: u64 = blocks.iter().sum();
            if counted_plain != want_plain || counted_ghost != complex + cheap {
                return Err(format!(
                    "n={n} lambda={lambda}: counted {counted_plain}/{counted_ghost}, closed form {want_plain}/{}",
                    complex + cheap
                ));
            }
            let costs: Vec<f64> = blocks.iter().map(|&b| b as f64).collect();
            let model = model_ratio(&costs, lambda, cheap as f64);
            let sym = StageCostSymbols {
                f: costs.clone(),
                p: costs.clone(),
                lambda,
                f_mix: cheap as f64,
                p_mix: cheap as f64,
            };
            let (_, lib) = reduction_ratios(&sym).map_err(|e| e.to_string())?;
            if (lib - model).abs() > 1e-12 * model {
                return Err(format!("n={n} lambda={lambda}: reduction_ratios {lib}, cost model {model}"));
            }
            rows.push(StageRow {
                n,
                lambda,
                empirical: counted_plain as f64 / counted_ghost as f64,
                model,
            });
        }
    }
    Ok(rows)
}

pub fn check_stage_ratios() -> Outcome {
    let rows = stage_rows()?;
    let mut worst = 0.0f64;
    for r in &rows {
        let rel = (r.empirical - r.model).abs() / r.model;
        if rel > RATIO_TOLERANCE {
            return Err(format!(
                "n={} lambda={}: measured {:.4}, model {:.4} ({:.1}% apart)",
                r.n,
                r.lambda,
                r.empirical,
                r.model,
                rel * 100.0
            ));
        }
        if r.lambda == 0.0 && (r.empirical != 1.0 || r.model != 1.0) {
            return Err(format!("n={} lambda=0: ratios {} / {}, expected exactly 1", r.n, r.empirical, r.model));
        }
        worst = worst.max(rel);
    }
    let eq = rows
        .iter()
        .find(|r| r.n == 4 && r.lambda == 0.5)
        .expect("grid contains n=4, lambda=0.5");
    if (eq.empirical - 2.0).abs() / 2.0 > RATIO_TOLERANCE {
        return Err(format!("n=4 lambda=0.5 equal blocks: measured {:.4}, expected 2.0 within 5%", eq.empirical));
    }
    Ok(format!(
        "{} stages, max model gap {:.2}%, n=4 lambda=0.5 ratio {:.4}",
        rows.len(),
        worst * 100.0,
        eq.empirical
    ))
}
