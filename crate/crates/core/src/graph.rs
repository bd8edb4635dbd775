//! Backend-neutral layer graphs.
//!
//! A [`LayerGraph`] is a list of typed nodes in topological order. Nodes may
//! only consume nodes that appear before them, so every graph is acyclic by
//! construction. The same graph drives parameter counting, MAC counting and
//! execution.
//!
//! # Text format
//!
//! ```text
//! distillkit-graph v1
//! # comments and blank lines are ignored
//! input input channels=3
//! stem.conv conv2d in=3 out=16 k=3 s=1 p=1 bias=0 <- input
//! stem.bn batchnorm c=16 <- stem.conv
//! ```
//!
//! One node per line: `id kind key=value... [<- input,input,...]`. The first
//! non-comment line is the version header.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_HEADER: &str = "distillkit-graph v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` consumes unknown node `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("node `{node}` expects {expected} input(s), got {got}")]
    Arity {
        node: String,
        expected: String,
        got: usize,
    },
    #[error("graph must contain exactly one input node, found {0}")]
    InputCount(usize),
    #[error("graph must have exactly one output, found sinks {0:?}")]
    SinkCount(Vec<String>),
    #[error("channel mismatch at `{node}`: {detail}")]
    Channels { node: String, detail: String },
    #[error("spatial size collapses at `{node}`: {detail}")]
    SpatialUnderflow { node: String, detail: String },
    #[error("invalid parameters for `{node}`: {detail}")]
    Params { node: String, detail: String },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: unknown layer kind `{kind}`")]
    UnknownKind { line: usize, kind: String },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Layer kinds with their shape-determining parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    PointwiseConv2d {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bias: bool,
    },
    /// Flattens its `C x H x W` input; `in_features` must equal `C*H*W`.
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPoolGlobal,
    /// Channel-wise concatenation; spatial sizes must agree.
    Concat,
    /// Elementwise sum of two inputs with equal channels. One operand may be
    /// `1 x 1` spatially, in which case it is broadcast.
    Add,
    /// Marks the logits output. Identity at execution time.
    SoftmaxHead,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerKind::PointwiseConv2d { .. } => "pointwise_conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
            LayerKind::SoftmaxHead => "softmax_head",
        }
    }

    /// Convenience constructor for a square convolution.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            bias,
        }
    }

    fn arity(&self) -> Arity {
        match self {
            LayerKind::Input { .. } => Arity::Exactly(0),
            LayerKind::Add => Arity::Exactly(2),
            LayerKind::Concat => Arity::AtLeast(2),
            _ => Arity::Exactly(1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "{k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

/// Output shape of a node for a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerGraph {
    nodes: Vec<LayerNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for LayerGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl Eq for LayerGraph {}

impl LayerGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        if self.index.len() == self.nodes.len() {
            self.index.get(id).copied()
        } else {
            self.nodes.iter().position(|n| n.id == id)
        }
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.position(id).map(|i| &self.nodes[i])
    }

    /// Appends a node, checking ids and arity. Inputs must already exist.
    pub fn add(&mut self, id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Result<String> {
        let id = id.into();
        self.rebuild_index_if_needed();
        if self.index.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        let arity = kind.arity();
        if !arity.accepts(inputs.len()) {
            return Err(GraphError::Arity {
                node: id,
                expected: arity.to_string(),
                got: inputs.len(),
            });
        }
        for input in inputs {
            if !self.index.contains_key(*input) {
                return Err(GraphError::UnknownInput {
                    node: id,
                    input: (*input).to_string(),
                });
            }
        }
        self.index.insert(id.clone(), self.nodes.len());
        self.nodes.push(LayerNode {
            id: id.clone(),
            kind,
            inputs: inputs.iter().map(|s| (*s).to_string()).collect(),
        });
        Ok(id)
    }

    fn rebuild_index_if_needed(&mut self) {
        if self.index.len() != self.nodes.len() {
            self.index = self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id.clone(), i))
                .collect();
        }
    }

    pub fn input_node(&self) -> Option<&LayerNode> {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, LayerKind::Input { .. }))
    }

    /// The unique node without consumers, i.e. the graph output.
    pub fn output_node(&self) -> Option<&LayerNode> {
        self.nodes.last()
    }

    /// Indices of each node's inputs, in node order.
    pub fn input_indices(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        self.nodes
            .iter()
            .map(|n| n.inputs.iter().map(|id| index[id.as_str()]).collect())
            .collect()
    }

    fn check_structure(&self) -> Result<()> {
        let inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(GraphError::InputCount(inputs));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut consumed = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if seen.insert(node.id.as_str(), i).is_some() {
                return Err(GraphError::DuplicateId(node.id.clone()));
            }
            let arity = node.kind.arity();
            if !arity.accepts(node.inputs.len()) {
                return Err(GraphError::Arity {
                    node: node.id.clone(),
                    expected: arity.to_string(),
                    got: node.inputs.len(),
                });
            }
            for input in &node.inputs {
                match seen.get(input.as_str()) {
                    Some(&j) if j < i => consumed[j] = true,
                    _ => {
                        return Err(GraphError::UnknownInput {
                            node: node.id.clone(),
                            input: input.clone(),
                        })
                    }
                }
            }
        }
        let sinks: Vec<String> = self
            .nodes
            .iter()
            .zip(&consumed)
            .filter(|(_, &c)| !c)
            .map(|(n, _)| n.id.clone())
            .collect();
        if sinks.len() != 1 {
            return Err(GraphError::SinkCount(sinks));
        }
        Ok(())
    }

    /// Structural and channel-arithmetic validation, independent of input size.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        self.propagate(None).map(|_| ())
    }

    /// Per-node output shapes for an `height x width` input.
    pub fn infer_shapes(&self, input_hw: (usize, usize)) -> Result<Vec<Shape>> {
        self.check_structure()?;
        self.propagate(Some(input_hw))
    }

    /// Shared shape propagation. Without an input size only channels are
    /// checked and spatial extents are reported as 1.
    fn propagate(&self, input_hw: Option<(usize, usize)>) -> Result<Vec<Shape>> {
        let spatial = input_hw.is_some();
        let (h0, w0) = input_hw.unwrap_or((1, 1));
        if spatial && (h0 == 0 || w0 == 0) {
            return Err(GraphError::SpatialUnderflow {
                node: "input".into(),
                detail: format!("input size {h0}x{w0}"),
            });
        }
        let indices = self.input_indices();
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (node, ins) in self.nodes.iter().zip(&indices) {
            let inp: Vec<Shape> = ins.iter().map(|&j| shapes[j]).collect();
            let channel_err = |detail: String| GraphError::Channels {
                node: node.id.clone(),
                detail,
            };
            let params_err = |detail: &str| GraphError::Params {
                node: node.id.clone(),
                detail: detail.to_string(),
            };
            let window = |size: usize, kernel: usize, stride: usize, padding: usize| -> Result<usize> {
                if !spatial {
                    return Ok(1);
                }
                let padded = size + 2 * padding;
                if padded < kernel {
                    return Err(GraphError::SpatialUnderflow {
                        node: node.id.clone(),
                        detail: format!("extent {size} (padded {padded}) is smaller than kernel {kernel}"),
                    });
                }
                Ok((padded - kernel) / stride + 1)
            };
            let shape = match &node.kind {
                LayerKind::Input { channels } => {
                    if *channels == 0 {
                        return Err(params_err("zero channels"));
                    }
                    Shape::new(*channels, h0, w0)
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if *kernel == 0 || *stride == 0 || *in_channels == 0 || *out_channels == 0 {
                        return Err(params_err("kernel, stride and channels must be positive"));
                    }
                    if inp[0].channels != *in_channels {
                        return Err(channel_err(format!(
                            "expects {in_channels} input channels, got {}",
                            inp[0].channels
                        )));
                    }
                    Shape::new(
                        *out_channels,
                        window(inp[0].height, *kernel, *stride, *padding)?,
                        window(inp[0].width, *kernel, *stride, *padding)?,
                    )
                }
                LayerKind::DepthwiseConv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if *kernel == 0 || *stride == 0 || *channels == 0 {
                        return Err(params_err("kernel, stride and channels must be positive"));
                    }
                    if inp[0].channels != *channels {
                        return Err(channel_err(format!(
                            "expects {channels} channels, got {}",
                            inp[0].channels
                        )));
                    }
                    Shape::new(
                        *channels,
                        window(inp[0].height, *kernel, *stride, *padding)?,
                        window(inp[0].width, *kernel, *stride, *padding)?,
                    )
                }
                LayerKind::PointwiseConv2d {
                    in_channels,
                    out_channels,
                    stride,
                    ..
                } => {
                    if *stride == 0 || *in_channels == 0 || *out_channels == 0 {
                        return Err(params_err("stride and channels must be positive"));
                    }
                    if inp[0].channels != *in_channels {
                        return Err(channel_err(format!(
                            "expects {in_channels} input channels, got {}",
                            inp[0].channels
                        )));
                    }
                    Shape::new(
                        *out_channels,
                        window(inp[0].height, 1, *stride, 0)?,
                        window(inp[0].width, 1, *stride, 0)?,
                    )
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if *in_features == 0 || *out_features == 0 {
                        return Err(params_err("features must be positive"));
                    }
                    let ok = if spatial {
                        inp[0].numel() == *in_features
                    } else {
                        in_features % inp[0].channels == 0
                    };
                    if !ok {
                        return Err(channel_err(format!(
                            "expects {in_features} features, input is {}x{}x{}",
                            inp[0].channels, inp[0].height, inp[0].width
                        )));
                    }
                    Shape::new(*out_features, 1, 1)
                }
                LayerKind::BatchNorm { channels } => {
                    if inp[0].channels != *channels {
                        return Err(channel_err(format!(
                            "expects {channels} channels, got {}",
                            inp[0].channels
                        )));
                    }
                    inp[0]
                }
                LayerKind::Relu | LayerKind::SoftmaxHead => inp[0],
                LayerKind::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(params_err("kernel and stride must be positive"));
                    }
                    Shape::new(
                        inp[0].channels,
                        window(inp[0].height, *kernel, *stride, 0)?,
                        window(inp[0].width, *kernel, *stride, 0)?,
                    )
                }
                LayerKind::AvgPoolGlobal => Shape::new(inp[0].channels, 1, 1),
                LayerKind::Concat => {
                    let first = inp[0];
                    if inp
                        .iter()
                        .any(|s| (s.height, s.width) != (first.height, first.width))
                    {
                        return Err(channel_err("concat inputs differ in spatial size".into()));
                    }
                    Shape::new(inp.iter().map(|s| s.channels).sum(), first.height, first.width)
                }
                LayerKind::Add => {
                    let (a, b) = (inp[0], inp[1]);
                    if a.channels != b.channels {
                        return Err(channel_err(format!(
                            "add operands have {} and {} channels",
                            a.channels, b.channels
                        )));
                    }
                    if a.spatial() == 1 {
                        b
                    } else if b.spatial() == 1 || (a.height, a.width) == (b.height, b.width) {
                        a
                    } else {
                        return Err(channel_err(format!(
                            "add operands are {}x{} and {}x{}",
                            a.height, a.width, b.height, b.width
                        )));
                    }
                }
            };
            if spatial && shape.spatial() == 0 {
                return Err(GraphError::SpatialUnderflow {
                    node: node.id.clone(),
                    detail: "output has zero extent".into(),
                });
            }
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Serializes to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FORMAT_HEADER);
        out.push('\n');
        for node in &self.nodes {
            let _ = write!(out, "{} {}", node.id, node.kind.name());
            for (key, value) in kind_params(&node.kind) {
                let _ = write!(out, " {key}={value}");
            }
            if !node.inputs.is_empty() {
                let _ = write!(out, " <- {}", node.inputs.join(","));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text format and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut graph = LayerGraph::new();
        let mut header_seen = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != FORMAT_HEADER {
                    return Err(GraphError::Parse {
                        line: line_no,
                        detail: format!("expected header `{FORMAT_HEADER}`, found `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let (decl, inputs) = match line.split_once("<-") {
                Some((d, i)) => (d.trim(), i.trim()),
                None => (line, ""),
            };
            let mut tokens = decl.split_whitespace();
            let parse_err = |detail: String| GraphError::Parse {
                line: line_no,
                detail,
            };
            let id = tokens
                .next()
                .ok_or_else(|| parse_err("missing node id".into()))?;
            let kind_name = tokens
                .next()
                .ok_or_else(|| parse_err(format!("node `{id}` has no kind")))?;
            let mut params = HashMap::new();
            for token in tokens {
                let (key, value) = token
                    .split_once('=')
                    .ok_or_else(|| parse_err(format!("expected key=value, found `{token}`")))?;
                let value: usize = value
                    .parse()
                    .map_err(|_| parse_err(format!("`{key}` is not a nonnegative integer")))?;
                if params.insert(key.to_string(), value).is_some() {
                    return Err(parse_err(format!("`{key}` given twice")));
                }
            }
            let kind = kind_from_params(kind_name, &mut params, line_no)?;
            if let Some(extra) = params.keys().next() {
                return Err(parse_err(format!("unexpected parameter `{extra}` for {kind_name}")));
            }
            let inputs: Vec<&str> = if inputs.is_empty() {
                Vec::new()
            } else {
                inputs.split(',').map(str::trim).collect()
            };
            graph.add(id, kind, &inputs).map_err(|e| parse_err(e.to_string()))?;
        }
        if !header_seen {
            return Err(GraphError::Parse {
                line: 1,
                detail: "empty graph file".into(),
            });
        }
        graph.validate()?;
        Ok(graph)
    }
}

fn kind_params(kind: &LayerKind) -> Vec<(&'static str, usize)> {
    let flag = |b: bool| usize::from(b);
    match *kind {
        LayerKind::Input { channels } => vec![("channels", channels)],
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => vec![
            ("in", in_channels),
            ("out", out_channels),
            ("k", kernel),
            ("s", stride),
            ("p", padding),
            ("bias", flag(bias)),
        ],
        LayerKind::DepthwiseConv2d {
            channels,
            kernel,
            stride,
            padding,
            bias,
        } => vec![
            ("c", channels),
            ("k", kernel),
            ("s", stride),
            ("p", padding),
            ("bias", flag(bias)),
        ],
        LayerKind::PointwiseConv2d {
            in_channels,
            out_channels,
            stride,
            bias,
        } => vec![
            ("in", in_channels),
            ("out", out_channels),
            ("s", stride),
            ("bias", flag(bias)),
        ],
        LayerKind::Linear {
            in_features,
            out_features,
            bias,
        } => vec![("in", in_features), ("out", out_features), ("bias", flag(bias))],
        LayerKind::BatchNorm { channels } => vec![("c", channels)],
        LayerKind::MaxPool { kernel, stride } => vec![("k", kernel), ("s", stride)],
        LayerKind::Relu
        | LayerKind::AvgPoolGlobal
        | LayerKind::Concat
        | LayerKind::Add
        | LayerKind::SoftmaxHead => Vec::new(),
    }
}

fn kind_from_params(name: &str, params: &mut HashMap<String, usize>, line: usize) -> Result<LayerKind> {
    let mut take = |key: &str| -> Result<usize> {
        params.remove(key).ok_or_else(|| GraphError::Parse {
            line,
            detail: format!("{name} requires `{key}`"),
        })
    };
    let kind = match name {
        "input" => LayerKind::Input {
            channels: take("channels")?,
        },
        "conv2d" => LayerKind::Conv2d {
            in_channels: take("in")?,
            out_channels: take("out")?,
            kernel: take("k")?,
            stride: take("s")?,
            padding: take("p")?,
            bias: take("bias")? != 0,
        },
        "depthwise_conv2d" => LayerKind::DepthwiseConv2d {
            channels: take("c")?,
            kernel: take("k")?,
            stride: take("s")?,
            padding: take("p")?,
            bias: take("bias")? != 0,
        },
        "pointwise_conv2d" => LayerKind::PointwiseConv2d {
            in_channels: take("in")?,
            out_channels: take("out")?,
            stride: take("s")?,
            bias: take("bias")? != 0,
        },
        "linear" => LayerKind::Linear {
            in_features: take("in")?,
            out_features: take("out")?,
            bias: take("bias")? != 0,
        },
        "batchnorm" => LayerKind::BatchNorm { channels: take("c")? },
        "maxpool" => LayerKind::MaxPool {
            kernel: take("k")?,
            stride: take("s")?,
        },
        "relu" => LayerKind::Relu,
        "avgpool_global" => LayerKind::AvgPoolGlobal,
        "concat" => LayerKind::Concat,
        "add" => LayerKind::Add,
        "softmax_head" => LayerKind::SoftmaxHead,
        other => {
            return Err(GraphError::UnknownKind {
                line,
                kind: other.to_string(),
            })
        }
    };
    Ok(kind)
}
