//! Parameter and multiply-accumulate counting over a [`LayerGraph`], plus the
//! symbolic G-Ghost reduction-ratio calculator.
//!
//! MACs are reported under the "FLOPs" label: one multiply-accumulate counts
//! as one FLOP. Activations, pooling, batchnorm, concat and add are free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_gghost_stage, BuildError, GGhostStageSpec};
use crate::graph::{GraphError, LayerGraph, LayerKind};

pub const FLOPS_CONVENTION: &str = "FLOPs are counted as multiply-accumulates (1 MAC = 1 FLOP)";

/// Relative tolerance used by [`crosscheck_stage`].
pub const CROSSCHECK_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid cost symbols: {0}")]
    Symbols(String),
    #[error("reduction ratio denominator is not positive ({0})")]
    Denominator(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Per-block costs of one stage: `f_i`, `p_i`, `lambda`, `f^c`, `p^c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCostSymbols {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
    pub f_mix: f64,
    pub p_mix: f64,
}

fn ratio(costs: &[f64], lambda: f64, mix: f64) -> Result<f64> {
    let keep = 1.0 - lambda;
    let numerator: f64 = costs.iter().sum();
    // Same summation order as the numerator, so lambda = 0 gives exactly 1.
    let mut denominator = costs[0] + keep * costs[1];
    for c in &costs[2..] {
        denominator += keep * keep * c;
    }
    denominator += mix;
    if denominator.is_nan() || denominator <= 0.0 {
        return Err(AnalysisError::Denominator(denominator));
    }
    Ok(numerator / denominator)
}

/// `r = sum(c_i) / (c_1 + (1-l) c_2 + sum_{i>=3} (1-l)^2 c_i + c_mix)` for
/// FLOPs and parameters. Returns `(r_f, r_p)`.
pub fn reduction_ratios(sym: &StageCostSymbols) -> Result<(f64, f64)> {
    let n = sym.f.len();
    if n < 2 {
        return Err(AnalysisError::Symbols(format!("need n >= 2 blocks, got {n}")));
    }
    if sym.p.len() != n {
        return Err(AnalysisError::Symbols(format!(
            "{} FLOP terms but {} parameter terms",
            n,
            sym.p.len()
        )));
    }
    if !(0.0..1.0).contains(&sym.lambda) {
        return Err(AnalysisError::Symbols(format!("lambda {} outside [0, 1)", sym.lambda)));
    }
    let all = sym.f.iter().chain(&sym.p).chain([&sym.f_mix, &sym.p_mix]);
    if all.into_iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AnalysisError::Symbols("costs must be finite and nonnegative".into()));
    }
    Ok((ratio(&sym.f, sym.lambda, sym.f_mix)?, ratio(&sym.p, sym.lambda, sym.p_mix)?))
}

fn node_params(kind: &LayerKind) -> u64 {
    let b = |bias: bool, n: usize| if bias { n as u64 } else { 0 };
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            bias,
            ..
        } => (kernel * kernel * in_channels * out_channels) as u64 + b(bias, out_channels),
        LayerKind::DepthwiseConv2d {
            channels, kernel, bias, ..
        } => (kernel * kernel * channels) as u64 + b(bias, channels),
        LayerKind::PointwiseConv2d {
            in_channels,
            out_channels,
            bias,
            ..
        } => (in_channels * out_channels) as u64 + b(bias, out_channels),
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => (in_features * out_features) as u64 + b(bias, out_features),
        LayerKind::BatchNorm { channels } => 2 * channels as u64,
        LayerKind::Input { .. }
        | LayerKind::Relu
        | LayerKind::MaxPool { .. }
        | LayerKind::AvgPoolGlobal
        | LayerKind::Concat
        | LayerKind::Add
        | LayerKind::SoftmaxHead => 0,
    }
}

fn node_macs(kind: &LayerKind, out_spatial: u64) -> u64 {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => (kernel * kernel * in_channels * out_channels) as u64 * out_spatial,
        LayerKind::DepthwiseConv2d { channels, kernel, .. } => (kernel * kernel * channels) as u64 * out_spatial,
        LayerKind::PointwiseConv2d {
            in_channels,
            out_channels,
            ..
        } => (in_channels * out_channels) as u64 * out_spatial,
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => (in_features * out_features) as u64,
        _ => 0,
    }
}

/// Exact trainable parameter count (weights, biases, batchnorm affine).
pub fn count_params(graph: &LayerGraph) -> Result<u64> {
    graph.validate()?;
    Ok(graph.nodes().iter().map(|n| node_params(&n.kind)).sum())
}

/// Multiply-accumulates for one `input_hw` sample.
pub fn count_macs(graph: &LayerGraph, input_hw: (usize, usize)) -> Result<u64> {
    Ok(analyze(graph, input_hw)?.total_macs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_hw: (usize, usize),
    pub total_params: u64,
    pub total_macs: u64,
    /// Reduction ratios, filled in only for G-Ghost stage crosschecks.
    pub r_f: Option<f64>,
    pub r_p: Option<f64>,
    pub per_layer: Vec<LayerCost>,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_millions(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    /// Sums of the per-layer rows whose id starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> (u64, u64) {
        self.per_layer
            .iter()
            .filter(|l| l.id.starts_with(prefix))
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
    }

    pub fn to_text(&self) -> String {
        let id_width = self
            .per_layer
            .iter()
            .map(|l| l.id.len())
            .chain(["layer".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "# {FLOPS_CONVENTION}");
        let _ = writeln!(out, "# input {}x{}", self.input_hw.0, self.input_hw.1);
        let _ = writeln!(
            out,
            "{:<id_width$}  {:<16}  {:>12}  {:>14}",
            "layer", "kind", "params", "FLOPs (MACs)"
        );
        for l in &self.per_layer {
            let _ = writeln!(out, "{:<id_width$}  {:<16}  {:>12}  {:>14}", l.id, l.kind, l.params, l.macs);
        }
        let _ = writeln!(out, "total params: {} ({:.2} M)", self.total_params, self.params_millions());
        let _ = writeln!(out, "total FLOPs:  {} ({:.2} M)", self.total_macs, self.flops_millions());
        if let (Some(rf), Some(rp)) = (self.r_f, self.r_p) {
            let _ = writeln!(out, "r_f: {rf:.4}  r_p: {rp:.4}");
        }
        out
    }
}

/// Per-layer parameter and MAC counts.
pub fn analyze(graph: &LayerGraph, input_hw: (usize, usize)) -> Result<ComplexityReport> {
    let shapes = graph.infer_shapes(input_hw)?;
    let per_layer: Vec<LayerCost> = graph
        .nodes()
        .iter()
        .zip(&shapes)
        .map(|(node, shape)| LayerCost {
            id: node.id.clone(),
            kind: node.kind.name().to_string(),
            params: node_params(&node.kind),
            macs: node_macs(&node.kind, shape.spatial() as u64),
        })
        .collect();
    Ok(ComplexityReport {
        input_hw,
        total_params: per_layer.iter().map(|l| l.params).sum(),
        total_macs: per_layer.iter().map(|l| l.macs).sum(),
        r_f: None,
        r_p: None,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCrosscheck {
    pub spec: GGhostStageSpec,
    pub input_hw: (usize, usize),
    pub plain: ComplexityReport,
    pub ghost: ComplexityReport,
    /// Block costs measured on the plain stage plus mix costs measured on the
    /// ghost stage (cheap branch and mix path).
    pub symbols: StageCostSymbols,
    pub empirical_r_f: f64,
    pub empirical_r_p: f64,
    pub symbolic_r_f: f64,
    pub symbolic_r_p: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
}

impl StageCrosscheck {
    pub fn rel_error_f(&self) -> f64 {
        (self.empirical_r_f - self.symbolic_r_f).abs() / self.symbolic_r_f
    }

    pub fn rel_error_p(&self) -> f64 {
        (self.empirical_r_p - self.symbolic_r_p).abs() / self.symbolic_r_p
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "G-Ghost stage n={} lambda={} {}->{} stride={} at {}x{}",
            s.n, s.lambda, s.in_channels, s.out_channels, s.stride, self.input_hw.0, self.input_hw.1
        );
        let _ = writeln!(out, "# {FLOPS_CONVENTION}");
        let _ = writeln!(
            out,
            "plain: {} params, {} FLOPs | ghost: {} params, {} FLOPs",
            self.plain.total_params, self.plain.total_macs, self.ghost.total_params, self.ghost.total_macs
        );
        let _ = writeln!(
            out,
            "r_p empirical {:.4} symbolic {:.4} (rel err {:.4})",
            self.empirical_r_p,
            self.symbolic_r_p,
            self.rel_error_p()
        );
        let _ = writeln!(
            out,
            "r_f empirical {:.4} symbolic {:.4} (rel err {:.4})",
            self.empirical_r_f,
            self.symbolic_r_f,
            self.rel_error_f()
        );
        let verdict = if self.within_tolerance { "ok" } else { "DIVERGES" };
        let _ = writeln!(out, "agreement within {:.0}%: {verdict}", self.tolerance * 100.0);
        out
    }
}

/// Builds the stage at its ratio and at `lambda = 0`, counts both, and
/// compares the measured reduction ratios with [`reduction_ratios`].
pub fn crosscheck_stage(spec: &GGhostStageSpec, input_hw: (usize, usize)) -> Result<StageCrosscheck> {
    let plain_graph = build_gghost_stage(&spec.plain())?;
    let ghost_graph = build_gghost_stage(spec)?;
    let plain = analyze(&plain_graph, input_hw)?;
    let ghost = analyze(&ghost_graph, input_hw)?;

    let (mut f, mut p) = (Vec::with_capacity(spec.n), Vec::with_capacity(spec.n));
    for i in 1..=spec.n {
        let (params, macs) = plain.sum_prefix(&format!("block{i}."));
        p.push(params as f64);
        f.push(macs as f64);
    }
    let (ghost_p, ghost_f) = ghost.sum_prefix("ghost.");
    let (mix_p, mix_f) = ghost.sum_prefix("mix.");
    let symbols = StageCostSymbols {
        f,
        p,
        lambda: spec.lambda,
        f_mix: (ghost_f + mix_f) as f64,
        p_mix: (ghost_p + mix_p) as f64,
    };
    let (symbolic_r_f, symbolic_r_p) = reduction_ratios(&symbols)?;
    let empirical_r_f = plain.total_macs as f64 / ghost.total_macs as f64;
    let empirical_r_p = plain.total_params as f64 / ghost.total_params as f64;
    let mut check = StageCrosscheck {
        spec: spec.clone(),
        input_hw,
        plain,
        ghost,
        symbols,
        empirical_r_f,
        empirical_r_p,
        symbolic_r_f,
        symbolic_r_p,
        tolerance: CROSSCHECK_TOLERANCE,
        within_tolerance: false,
    };
    check.within_tolerance =
        check.rel_error_f() <= CROSSCHECK_TOLERANCE && check.rel_error_p() <= CROSSCHECK_TOLERANCE;
    check.ghost.r_f = Some(empirical_r_f);
    check.ghost.r_p = Some(empirical_r_p);
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sym(f: Vec<f64>, lambda: f64, mix: f64) -> StageCostSymbols {
        StageCostSymbols {
            p: f.clone(),
            f,
            lambda,
            f_mix: mix,
            p_mix: mix,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(reduction_ratios(&sym(vec![3.0, 5.0, 7.0], 0.0, 0.0)).unwrap(), (1.0, 1.0));
        let (rf, rp) = reduction_ratios(&sym(vec![10.0; 4], 0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(rf, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rp, 2.0, epsilon = 1e-12);
        let (rf, _) = reduction_ratios(&sym(vec![1.0; 3], 0.5, 0.1)).unwrap();
        assert_abs_diff_eq!(rf, 3.0 / 1.85, epsilon = 1e-12);
        assert_abs_diff_eq!(rf, 1.6216, epsilon = 1e-4);
    }

    #[test]
    fn ratio_rejects_short_stages() {
        assert!(matches!(
            reduction_ratios(&sym(vec![1.0], 0.5, 0.0)),
            Err(AnalysisError::Symbols(_))
        ));
        let mut s = sym(vec![1.0, 1.0], 0.5, 0.0);
        s.p.pop();
        assert!(reduction_ratios(&s).is_err());
        assert!(reduction_ratios(&sym(vec![0.0, 0.0], 0.5, 0.0)).is_err());
    }

    #[test]
    fn ratio_limit_near_one() {
        let costs = vec![2.0, 3.0, 4.0, 5.0];
        let (rf, _) = reduction_ratios(&sym(costs.clone(), 1.0 - 1e-9, 0.5)).unwrap();
        assert_abs_diff_eq!(rf, 14.0 / 2.5, epsilon = 1e-6);
    }

    #[test]
    fn ratio_monotone_in_lambda() {
        let mut last = 0.0;
        for step in 0..20 {
            let lambda = step as f64 * 0.05;
            let (rf, _) = reduction_ratios(&sym(vec![1.0; 5], lambda, 0.2)).unwrap();
            assert!(rf >= last);
            last = rf;
        }
    }

    #[test]
    fn crosscheck_zero_lambda_is_exact() {
        let c = crosscheck_stage(&GGhostStageSpec::new(3, 0.0, 16, 16, 1), (8, 8)).unwrap();
        assert_eq!(c.empirical_r_p, 1.0);
        assert_eq!(c.empirical_r_f, 1.0);
        assert_eq!(c.symbolic_r_p, 1.0);
        assert!(c.within_tolerance);
    }

    #[test]
    fn report_totals_are_row_sums() {
        let g = build_gghost_stage(&GGhostStageSpec::new(3, 0.5, 8, 16, 2)).unwrap();
        let r = analyze(&g, (16, 16)).unwrap();
        assert_eq!(r.total_params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total_macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.total_params, count_params(&g).unwrap());
        let text = r.to_text();
        assert!(text.contains(FLOPS_CONVENTION));
        assert!(text.contains("block2.conv"));
    }
}
