//! G-Ghost student stages and a VGG-style teacher, emitted as [`LayerGraph`]s.
//!
//! A G-Ghost stage of `n` blocks keeps block 1 at full width. Blocks `2..=n`
//! form the complex branch at `ceil((1 - lambda) * C)` channels while a cheap
//! branch (pointwise + depthwise on the block-1 output) supplies the remaining
//! channels. With the mix path enabled, the deepest complex-branch feature is
//! globally pooled, projected by a pointwise conv and broadcast-added into the
//! cheap branch. The two branches are concatenated back to `C` channels.
//!
//! Node ids inside a stage are `{prefix}block{i}.*`, `{prefix}ghost.*`,
//! `{prefix}mix.*` and `{prefix}concat`; the complexity analyzer relies on
//! these prefixes to attribute costs to blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, LayerGraph, LayerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuildError {
    #[error("ghost ratio {lambda} collapses the {branch} branch of a {channels}-channel stage to 0 channels")]
    Rounding {
        lambda: f64,
        channels: usize,
        branch: &'static str,
    },
    #[error("invalid stage spec: {0}")]
    Spec(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, BuildError>;

/// Residual block used for the per-block cost `f_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTemplate {
    /// 3x3 conv, batchnorm, identity skip when shapes allow, relu.
    #[default]
    ResidualConvBnRelu,
    /// 3x3 conv, batchnorm, relu without any skip connection.
    ConvBnRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GGhostStageSpec {
    pub n: usize,
    pub lambda: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub block_template: BlockTemplate,
    #[serde(default = "default_true")]
    pub mix_enabled: bool,
}

fn default_true() -> bool {
    true
}

/// Channel split of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelSplit {
    pub complex: usize,
    pub ghost: usize,
}

impl GGhostStageSpec {
    pub fn new(n: usize, lambda: f64, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            n,
            lambda,
            in_channels,
            out_channels,
            stride,
            block_template: BlockTemplate::default(),
            mix_enabled: true,
        }
    }

    /// The same stage with the cheap branch removed.
    pub fn plain(&self) -> Self {
        Self {
            lambda: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<ChannelSplit> {
        if self.n < 2 {
            return Err(BuildError::Spec(format!("a stage needs n >= 2 blocks, got {}", self.n)));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(BuildError::Spec(format!("lambda must lie in [0, 1), got {}", self.lambda)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(BuildError::Spec("channel counts must be positive".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(BuildError::Spec(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        self.split()
    }

    /// `complex = ceil((1 - lambda) * C)`, `ghost = C - complex`.
    pub fn split(&self) -> Result<ChannelSplit> {
        let c = self.out_channels;
        // Guard against 0.5 * 64 = 32.000000000000004 style rounding.
        let complex = (((1.0 - self.lambda) * c as f64) - 1e-9).ceil().max(0.0) as usize;
        let complex = complex.min(c);
        let ghost = c - complex;
        if complex == 0 {
            return Err(BuildError::Rounding {
                lambda: self.lambda,
                channels: c,
                branch: "complex",
            });
        }
        if self.lambda > 0.0 && ghost == 0 {
            return Err(BuildError::Rounding {
                lambda: self.lambda,
                channels: c,
                branch: "ghost",
            });
        }
        Ok(ChannelSplit { complex, ghost })
    }
}

fn conv_bn_block(
    graph: &mut LayerGraph,
    prefix: &str,
    input: &str,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    template: BlockTemplate,
) -> Result<String> {
    let conv = graph.add(
        format!("{prefix}.conv"),
        LayerKind::conv(in_channels, out_channels, 3, stride, false),
        &[input],
    )?;
    let mut last = graph.add(
        format!("{prefix}.bn"),
        LayerKind::BatchNorm {
            channels: out_channels,
        },
        &[&conv],
    )?;
    let skip = template == BlockTemplate::ResidualConvBnRelu && stride == 1 && in_channels == out_channels;
    if skip {
        last = graph.add(format!("{prefix}.add"), LayerKind::Add, &[&last, input])?;
    }
    Ok(graph.add(format!("{prefix}.relu"), LayerKind::Relu, &[&last])?)
}

/// Appends a G-Ghost stage consuming `input`; returns the id of its output.
pub fn append_gghost_stage(graph: &mut LayerGraph, prefix: &str, input: &str, spec: &GGhostStageSpec) -> Result<String> {
    let split = spec.validate()?;
    let full = spec.out_channels;
    let block1 = conv_bn_block(
        graph,
        &format!("{prefix}block1"),
        input,
        spec.in_channels,
        full,
        spec.stride,
        spec.block_template,
    )?;
    let mut complex = block1.clone();
    let mut width = full;
    for i in 2..=spec.n {
        complex = conv_bn_block(
            graph,
            &format!("{prefix}block{i}"),
            &complex,
            width,
            split.complex,
            1,
            spec.block_template,
        )?;
        width = split.complex;
    }
    if split.ghost == 0 {
        return Ok(complex);
    }

    let g = split.ghost;
    let pw = graph.add(
        format!("{prefix}ghost.pw"),
        LayerKind::PointwiseConv2d {
            in_channels: full,
            out_channels: g,
            stride: 1,
            bias: false,
        },
        &[&block1],
    )?;
    let pw_bn = graph.add(format!("{prefix}ghost.pw_bn"), LayerKind::BatchNorm { channels: g }, &[&pw])?;
    let dw = graph.add(
        format!("{prefix}ghost.dw"),
        LayerKind::DepthwiseConv2d {
            channels: g,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
        &[&pw_bn],
    )?;
    let dw_bn = graph.add(format!("{prefix}ghost.dw_bn"), LayerKind::BatchNorm { channels: g }, &[&dw])?;
    let mut ghost = graph.add(format!("{prefix}ghost.relu"), LayerKind::Relu, &[&dw_bn])?;

    if spec.mix_enabled {
        let pool = graph.add(format!("{prefix}mix.pool"), LayerKind::AvgPoolGlobal, &[&complex])?;
        let proj = graph.add(
            format!("{prefix}mix.pw"),
            LayerKind::PointwiseConv2d {
                in_channels: split.complex,
                out_channels: g,
                stride: 1,
                bias: true,
            },
            &[&pool],
        )?;
        ghost = graph.add(format!("{prefix}mix.add"), LayerKind::Add, &[&ghost, &proj])?;
    }
    Ok(graph.add(format!("{prefix}concat"), LayerKind::Concat, &[&complex, &ghost])?)
}

/// Recover the specs of G-Ghost stages in a graph built by
/// [`append_gghost_stage`], keyed by node-id prefix. Only stages with a cheap
/// branch are recognizable.
pub fn detect_stages(graph: &LayerGraph) -> Vec<(String, GGhostStageSpec)> {
    let mut found = Vec::new();
    for node in graph.nodes() {
        let Some(prefix) = node.id.strip_suffix("ghost.pw") else { continue };
        let LayerKind::PointwiseConv2d { out_channels: ghost, .. } = node.kind else { continue };
        let Some(LayerKind::Conv2d {
            in_channels,
            out_channels,
            stride,
            ..
        }) = graph.node(&format!("{prefix}block1.conv")).map(|n| n.kind.clone())
        else {
            continue;
        };
        let n = (2..)
            .take_while(|i| graph.node(&format!("{prefix}block{i}.conv")).is_some())
            .last()
            .unwrap_or(1);
        let residual = (1..=n).any(|i| graph.node(&format!("{prefix}block{i}.add")).is_some());
        let spec = GGhostStageSpec {
            n,
            lambda: ghost as f64 / out_channels as f64,
            in_channels,
            out_channels,
            stride,
            block_template: if residual || n == 2 {
                BlockTemplate::ResidualConvBnRelu
            } else {
                BlockTemplate::ConvBnRelu
            },
            mix_enabled: graph.node(&format!("{prefix}mix.pw")).is_some(),
        };
        if spec.validate().map(|s| s.ghost == ghost).unwrap_or(false) {
            found.push((prefix.to_string(), spec));
        }
    }
    found
}

/// A standalone stage graph with its own input node.
pub fn build_gghost_stage(spec: &GGhostStageSpec) -> Result<LayerGraph> {
    let mut graph = LayerGraph::new();
    graph.add(
        "input",
        LayerKind::Input {
            channels: spec.in_channels,
        },
        &[],
    )?;
    append_gghost_stage(&mut graph, "", "input", spec)?;
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageConfig>,
    pub lambda: f64,
    pub mix_enabled: bool,
    pub block_template: BlockTemplate,
}

impl Default for StudentConfig {
    /// Full-size student at 224x224 with about 2.36M parameters.
    fn default() -> Self {
        let stage = |out_channels, blocks, stride| StageConfig {
            out_channels,
            blocks,
            stride,
        };
        Self {
            input_hw: (224, 224),
            num_classes: 30,
            stem_channels: 32,
            stem_stride: 2,
            stages: vec![
                stage(48, 2, 2),
                stage(96, 3, 2),
                stage(192, 4, 2),
                stage(336, 4, 2),
            ],
            lambda: 0.5,
            mix_enabled: true,
            block_template: BlockTemplate::default(),
        }
    }
}

impl StudentConfig {
    /// Small student for 32x32 desk-scale experiments.
    pub fn desk(num_classes: usize) -> Self {
        let stage = |out_channels, blocks, stride| StageConfig {
            out_channels,
            blocks,
            stride,
        };
        Self {
            input_hw: (32, 32),
            num_classes,
            stem_channels: 8,
            stem_stride: 1,
            stages: vec![stage(16, 2, 2), stage(32, 3, 2), stage(48, 3, 2)],
            lambda: 0.5,
            mix_enabled: true,
            block_template: BlockTemplate::default(),
        }
    }

    pub fn stage_specs(&self) -> Vec<GGhostStageSpec> {
        let mut in_channels = self.stem_channels;
        self.stages
            .iter()
            .map(|s| {
                let spec = GGhostStageSpec {
                    n: s.blocks,
                    lambda: self.lambda,
                    in_channels,
                    out_channels: s.out_channels,
                    stride: s.stride,
                    block_template: self.block_template,
                    mix_enabled: self.mix_enabled,
                };
                in_channels = s.out_channels;
                spec
            })
            .collect()
    }
}

fn classifier_head(graph: &mut LayerGraph, input: &str, channels: usize, num_classes: usize) -> Result<()> {
    let pool = graph.add("head.pool", LayerKind::AvgPoolGlobal, &[input])?;
    let fc = graph.add(
        "head.fc",
        LayerKind::Linear {
            in_features: channels,
            out_features: num_classes,
            bias: true,
        },
        &[&pool],
    )?;
    graph.add("head.out", LayerKind::SoftmaxHead, &[&fc])?;
    Ok(())
}

fn check_common(input_hw: (usize, usize), num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(BuildError::Architecture(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if input_hw.0 == 0 || input_hw.1 == 0 {
        return Err(BuildError::Architecture("input size must be positive".into()));
    }
    Ok(())
}

/// Stem conv, G-Ghost stages, global pooling and a linear classifier.
pub fn build_student(config: &StudentConfig) -> Result<LayerGraph> {
    check_common(config.input_hw, config.num_classes)?;
    if config.stages.is_empty() {
        return Err(BuildError::Architecture("student needs at least one stage".into()));
    }
    if config.stem_channels == 0 || !matches!(config.stem_stride, 1 | 2) {
        return Err(BuildError::Architecture("stem needs positive channels and stride 1 or 2".into()));
    }
    let mut graph = LayerGraph::new();
    graph.add("input", LayerKind::Input { channels: 3 }, &[])?;
    let conv = graph.add(
        "stem.conv",
        LayerKind::conv(3, config.stem_channels, 3, config.stem_stride, false),
        &["input"],
    )?;
    let bn = graph.add(
        "stem.bn",
        LayerKind::BatchNorm {
            channels: config.stem_channels,
        },
        &[&conv],
    )?;
    let mut last = graph.add("stem.relu", LayerKind::Relu, &[&bn])?;
    let specs = config.stage_specs();
    for (i, spec) in specs.iter().enumerate() {
        last = append_gghost_stage(&mut graph, &format!("stage{}.", i + 1), &last, spec)?;
    }
    let channels = specs.last().map(|s| s.out_channels).unwrap_or(config.stem_channels);
    classifier_head(&mut graph, &last, channels, config.num_classes)?;
    graph.infer_shapes(config.input_hw)?;
    Ok(graph)
}

/// VGG-style teacher: groups of 3x3 conv(+bn)+relu separated by 2x2 max
/// pooling, then global pooling and a linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    /// Channel multiplier applied to every conv in `plan`.
    pub width: f64,
    pub batchnorm: bool,
    /// Conv widths per pooling group before the width multiplier.
    pub plan: Vec<Vec<usize>>,
}

pub const VGG16_PLAN: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

impl Default for TeacherConfig {
    /// VGG-16 convolutional body with a pooled linear head (about 14.7M parameters).
    fn default() -> Self {
        Self {
            input_hw: (224, 224),
            num_classes: 30,
            width: 1.0,
            batchnorm: true,
            plan: VGG16_PLAN.iter().map(|g| g.to_vec()).collect(),
        }
    }
}

impl TeacherConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            input_hw: (32, 32),
            num_classes,
            width: 0.25,
            batchnorm: true,
            plan: vec![vec![64, 64], vec![128, 128], vec![256, 256]],
        }
    }
}

pub fn build_teacher(config: &TeacherConfig) -> Result<LayerGraph> {
    check_common(config.input_hw, config.num_classes)?;
    if config.plan.is_empty() || config.plan.iter().any(Vec::is_empty) {
        return Err(BuildError::Architecture("teacher plan has an empty group".into()));
    }
    if !(config.width.is_finite() && config.width > 0.0) {
        return Err(BuildError::Architecture(format!("width must be positive, got {}", config.width)));
    }
    let mut graph = LayerGraph::new();
    let mut last = graph.add("input", LayerKind::Input { channels: 3 }, &[])?;
    let mut channels = 3;
    for (g, group) in config.plan.iter().enumerate() {
        for (c, &base) in group.iter().enumerate() {
            let out = ((base as f64 * config.width).round() as usize).max(1);
            let prefix = format!("features{}.{}", g + 1, c + 1);
            last = graph.add(
                format!("{prefix}.conv"),
                LayerKind::conv(channels, out, 3, 1, !config.batchnorm),
                &[&last],
            )?;
            if config.batchnorm {
                last = graph.add(format!("{prefix}.bn"), LayerKind::BatchNorm { channels: out }, &[&last])?;
            }
            last = graph.add(format!("{prefix}.relu"), LayerKind::Relu, &[&last])?;
            channels = out;
        }
        last = graph.add(
            format!("features{}.pool", g + 1),
            LayerKind::MaxPool { kernel: 2, stride: 2 },
            &[&last],
        )?;
    }
    classifier_head(&mut graph, &last, channels, config.num_classes)?;
    graph.infer_shapes(config.input_hw)?;
    Ok(graph)
}
