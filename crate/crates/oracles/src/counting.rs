//! A ten-layer fixture whose per-layer costs are written out by hand.

use distillkit::complexity::{analyze, count_macs, count_params};
use distillkit::graph::{LayerGraph, LayerKind};

use crate::Outcome;

pub fn fixture() -> LayerGraph {
    let mut g = LayerGraph::new();
    let add = |g: &mut LayerGraph, id: &str, kind, inputs: &[&str]| {
        g.add(id, kind, inputs).expect("fixture is well formed");
    };
    add(&mut g, "input", LayerKind::Input { channels: 3 }, &[]);
    add(&mut g, "conv1", LayerKind::conv(3, 16, 3, 1, true), &["input"]);
    add(&mut g, "bn1", LayerKind::BatchNorm { channels: 16 }, &["conv1"]);
    add(&mut g, "relu1", LayerKind::Relu, &["bn1"]);
    add(
        &mut g,
        "dw",
        LayerKind::DepthwiseConv2d {
            channels: 16,
            kernel: 3,
            stride: 2,
            padding: 1,
            bias: false,
        },
        &["relu1"],
    );
    add(
        &mut g,
        "pw",
        LayerKind::PointwiseConv2d {
            in_channels: 16,
            out_channels: 32,
            stride: 1,
            bias: true,
        },
        &["dw"],
    );
    add(&mut g, "pool", LayerKind::MaxPool { kernel: 2, stride: 2 }, &["pw"]);
    add(&mut g, "conv2", LayerKind::conv(32, 32, 3, 1, false), &["pool"]);
    add(&mut g, "gap", LayerKind::AvgPoolGlobal, &["conv2"]);
    add(
        &mut g,
        "fc",
        LayerKind::Linear {
            in_features: 32,
            out_features: 10,
            bias: true,
        },
        &["gap"],
    );
    add(&mut g, "head", LayerKind::SoftmaxHead, &["fc"]);
    g
}

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

/// `(layer, params, MACs)` for an `h x w` input.
pub fn hand_costs(h: usize, w: usize) -> Vec<(&'static str, u64, u64)> {
    let (h2, w2) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let (h3, w3) = ((h2 - 2) / 2 + 1, (w2 - 2) / 2 + 1);
    let hw = |a: usize, b: usize| (a * b) as u64;
    vec![
        ("conv1", 3 * 3 * 3 * 16 + 16, 3 * 3 * 3 * 16 * hw(h, w)),
        ("bn1", 2 * 16, 0),
        ("relu1", 0, 0),
        ("dw", 3 * 3 * 16, 3 * 3 * 16 * hw(h2, w2)),
        ("pw", 16 * 32 + 32, 16 * 32 * hw(h2, w2)),
        ("pool", 0, 0),
        ("conv2", 3 * 3 * 32 * 32, 3 * 3 * 32 * 32 * hw(h3, w3)),
        ("gap", 0, 0),
        ("fc", 32 * 10 + 10, 32 * 10),
        ("head", 0, 0),
    ]
}

pub fn check_counting() -> Outcome {
    let g = fixture();
    let mut summary = Vec::new();
    for hw in [(32, 32), (64, 48)] {
        let hand = hand_costs(hw.0, hw.1);
        let report = analyze(&g, hw).map_err(|e| e.to_string())?;
        for (id, params, macs) in &hand {
            let got = report
                .per_layer
                .iter()
                .find(|c| c.id == *id)
                .ok_or_else(|| format!("layer {id} missing from report"))?;
            if got.params != *params || got.macs != *macs {
                return Err(format!(
                    "{id} at {hw:?}: counted {}/{}, hand formula {params}/{macs}",
                    got.params, got.macs
                ));
            }
        }
        let params: u64 = hand.iter().map(|c| c.1).sum();
        let macs: u64 = hand.iter().map(|c| c.2).sum();
        let counted = (
            count_params(&g).map_err(|e| e.to_string())?,
            count_macs(&g, hw).map_err(|e| e.to_string())?,
        );
        if counted != (params, macs) || (report.total_params, report.total_macs) != counted {
            return Err(format!("totals at {hw:?}: counted {counted:?}, hand formula ({params}, {macs})"));
        }
        summary.push(format!("{}x{}: {params} params, {macs} MACs", hw.0, hw.1));
    }
    let conv1 = hand_costs(32, 32)[0];
    if (conv1.1, conv1.2) != (448, 442_368) {
        return Err(format!("3x3 conv 3->16 at 32x32: {conv1:?}"));
    }
    Ok(summary.join("; "))
}
