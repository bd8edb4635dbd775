//! Single-threaded CPU execution of a [`LayerGraph`].
//!
//! Activations are `f32` tensors in `(batch, channels, height, width)` order.
//! Convolutions go through per-sample im2col and a GEMM; everything else is
//! a direct loop. Training-mode forward passes record a [`Tape`] that
//! [`Network::backward`] consumes to produce parameter gradients.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, LayerGraph, LayerKind, Shape};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} channels, graph expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient has shape {got:?}, logits are {expected:?}")]
    GradShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("parameter store does not match the graph: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct NodeSlots {
    weight: Option<usize>,
    bias: Option<usize>,
    stats: Option<usize>,
}

/// Trainable parameters and batchnorm running statistics of one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
    pub bn_stats: Vec<BnStats>,
    slots: Vec<NodeSlots>,
}

impl ParamStore {
    /// Seeded initialization: Kaiming-normal conv weights, PyTorch-style
    /// uniform linear layers, unit batchnorm scale.
    pub fn init(graph: &LayerGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut slots = Vec::with_capacity(graph.len());
        let push = |params: &mut Vec<Param>, name: String, shape: Vec<usize>, value: Vec<f32>, decay: bool| {
            params.push(Param {
                name,
                shape,
                value,
                decay,
            });
            Some(params.len() - 1)
        };
        let normal = |rng: &mut ChaCha8Rng, n: usize, fan_in: usize| -> Vec<f32> {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        };
        for node in graph.nodes() {
            let id = &node.id;
            let mut slot = NodeSlots::default();
            match node.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let w = normal(&mut rng, out_channels * fan_in, fan_in);
                    slot.weight = push(
                        &mut params,
                        format!("{id}.weight"),
                        vec![out_channels, in_channels, kernel, kernel],
                        w,
                        true,
                    );
                    if bias {
                        slot.bias = push(&mut params, format!("{id}.bias"), vec![out_channels], vec![0.0; out_channels], false);
                    }
                }
                LayerKind::DepthwiseConv2d {
                    channels, kernel, bias, ..
                } => {
                    let w = normal(&mut rng, channels * kernel * kernel, kernel * kernel);
                    slot.weight = push(
                        &mut params,
                        format!("{id}.weight"),
                        vec![channels, 1, kernel, kernel],
                        w,
                        true,
                    );
                    if bias {
                        slot.bias = push(&mut params, format!("{id}.bias"), vec![channels], vec![0.0; channels], false);
                    }
                }
                LayerKind::PointwiseConv2d {
                    in_channels,
                    out_channels,
                    bias,
                    ..
                } => {
                    let w = normal(&mut rng, out_channels * in_channels, in_channels);
                    slot.weight = push(
                        &mut params,
                        format!("{id}.weight"),
                        vec![out_channels, in_channels, 1, 1],
                        w,
                        true,
                    );
                    if bias {
                        slot.bias = push(&mut params, format!("{id}.bias"), vec![out_channels], vec![0.0; out_channels], false);
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    bias,
                } => {
                    let bound = 1.0 / (in_features as f32).sqrt();
                    let w = (0..in_features * out_features)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    slot.weight = push(&mut params, format!("{id}.weight"), vec![out_features, in_features], w, true);
                    if bias {
                        let b = (0..out_features).map(|_| rng.gen_range(-bound..bound)).collect();
                        slot.bias = push(&mut params, format!("{id}.bias"), vec![out_features], b, false);
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    slot.weight = push(&mut params, format!("{id}.gamma"), vec![channels], vec![1.0; channels], false);
                    slot.bias = push(&mut params, format!("{id}.beta"), vec![channels], vec![0.0; channels], false);
                    bn_stats.push(BnStats {
                        mean: vec![0.0; channels],
                        var: vec![1.0; channels],
                    });
                    slot.stats = Some(bn_stats.len() - 1);
                }
                _ => {}
            }
            slots.push(slot);
        }
        Self {
            params,
            bn_stats,
            slots,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zero-filled buffers shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.value.len()]).collect()
    }

    fn weight(&self, node: usize) -> &[f32] {
        &self.params[self.slots[node].weight.expect("weight slot")].value
    }

    fn bias(&self, node: usize) -> Option<&[f32]> {
        self.slots[node].bias.map(|i| self.params[i].value.as_slice())
    }
}

/// A graph together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub graph: LayerGraph,
    pub params: ParamStore,
}

#[derive(Debug)]
enum Cache {
    None,
    Bn { xhat: Vec<f32>, inv_std: Vec<f32> },
    MaxPool { argmax: Vec<u32> },
}

/// Activations and per-node caches of one training-mode forward pass.
#[derive(Debug)]
pub struct Tape {
    activations: Vec<Array4<f32>>,
    caches: Vec<Cache>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Eval,
    Train,
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_identity(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(kind: &LayerKind, inp: Shape, out: Shape) -> Option<ConvGeom> {
    let (kernel, stride, pad) = match *kind {
        LayerKind::Conv2d {
            kernel, stride, padding, ..
        } => (kernel, stride, padding),
        LayerKind::PointwiseConv2d { stride, .. } => (1, stride, 0),
        _ => return None,
    };
    Some(ConvGeom {
        c_in: inp.channels,
        h: inp.height,
        w: inp.width,
        kernel,
        stride,
        pad,
        ho: out.height,
        wo: out.width,
    })
}

fn shape_of(a: &Array4<f32>) -> Shape {
    let (_, c, h, w) = a.dim();
    Shape::new(c, h, w)
}

fn dense(a: &Array4<f32>) -> &[f32] {
    a.as_slice().expect("activations are contiguous")
}

fn conv_forward(x: &Array4<f32>, weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom, c_out: usize) -> Array4<f32> {
    let batch = x.dim().0;
    let hw_out = g.ho * g.wo;
    let mut y = Array4::<f32>::zeros((batch, c_out, g.ho, g.wo));
    let w = ArrayView2::from_shape((c_out, g.rows()), weight).expect("weight shape");
    let xs = dense(x);
    let sample_in = g.c_in * g.h * g.w;
    let mut cols = vec![0.0f32; if g.is_identity() { 0 } else { g.rows() * hw_out }];
    let ys = y.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        let xb = &xs[b * sample_in..(b + 1) * sample_in];
        let colv = if g.is_identity() {
            ArrayView2::from_shape((g.rows(), hw_out), xb).expect("cols")
        } else {
            im2col(xb, g, &mut cols);
            ArrayView2::from_shape((g.rows(), hw_out), cols.as_slice()).expect("cols")
        };
        let yb_slice = &mut ys[b * c_out * hw_out..(b + 1) * c_out * hw_out];
        let mut yb = ArrayViewMut2::from_shape((c_out, hw_out), yb_slice).expect("out");
        general_mat_mul(1.0, &w, &colv, 0.0, &mut yb);
        if let Some(bias) = bias {
            for (mut row, &bv) in yb.outer_iter_mut().zip(bias) {
                row.mapv_inplace(|v| v + bv);
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Array4<f32>,
    dy: &Array4<f32>,
    weight: &[f32],
    g: &ConvGeom,
    c_out: usize,
    dweight: &mut [f32],
    dbias: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Array4<f32>> {
    let batch = x.dim().0;
    let hw_out = g.ho * g.wo;
    let rows = g.rows();
    let w = ArrayView2::from_shape((c_out, rows), weight).expect("weight shape");
    let mut dw = ArrayViewMut2::from_shape((c_out, rows), dweight).expect("dweight shape");
    let xs = dense(x);
    let dys = dense(dy);
    let sample_in = g.c_in * g.h * g.w;
    let mut cols = vec![0.0f32; rows * hw_out];
    let mut dcols = Array2::<f32>::zeros((rows, hw_out));
    let mut dx = want_dx.then(|| Array4::<f32>::zeros((batch, g.c_in, g.h, g.w)));
    let mut dbias = dbias;
    for b in 0..batch {
        let xb = &xs[b * sample_in..(b + 1) * sample_in];
        let dyb = ArrayView2::from_shape((c_out, hw_out), &dys[b * c_out * hw_out..(b + 1) * c_out * hw_out])
            .expect("dy");
        let colv = if g.is_identity() {
            ArrayView2::from_shape((rows, hw_out), xb).expect("cols")
        } else {
            im2col(xb, g, &mut cols);
            ArrayView2::from_shape((rows, hw_out), cols.as_slice()).expect("cols")
        };
        general_mat_mul(1.0, &dyb, &colv.t(), 1.0, &mut dw);
        if let Some(db) = dbias.as_deref_mut() {
            for (acc, row) in db.iter_mut().zip(dyb.outer_iter()) {
                *acc += row.sum();
            }
        }
        if let Some(dx) = dx.as_mut() {
            general_mat_mul(1.0, &w.t(), &dyb, 0.0, &mut dcols);
            let dxs = dx.as_slice_mut().expect("contiguous");
            let dxb = &mut dxs[b * sample_in..(b + 1) * sample_in];
            let dc = dcols.as_slice().expect("contiguous");
            if g.is_identity() {
                for (d, s) in dxb.iter_mut().zip(dc) {
                    *d += s;
                }
            } else {
                col2im(dc, g, dxb);
            }
        }
    }
    dx
}

struct DwGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl DwGeom {
    /// Calls `f(out_index, in_index, weight_index)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, b: usize, c: usize, mut f: impl FnMut(usize, usize, usize)) {
        let in_base = (b * self.c + c) * self.h * self.w;
        let out_base = (b * self.c + c) * self.ho * self.wo;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        f(
                            out_base + oy * self.wo + ox,
                            in_base + iy as usize * self.w + ix as usize,
                            (c * self.k + ky) * self.k + kx,
                        );
                    }
                }
            }
        }
    }
}

/// `(y, x_hat, inv_std, batch mean, biased batch var)`.
type BnTrainOut = (Array4<f32>, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>);

fn bn_train(x: &Array4<f32>, gamma: &[f32], beta: &[f32]) -> BnTrainOut {
    let (batch, c, h, w) = x.dim();
    let hw = h * w;
    let m = (batch * hw) as f64;
    let xs = dense(x);
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            sum += xs[off..off + hw].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for b in 0..batch {
            let off = (b * c + ch) * hw;
            sq += xs[off..off + hw]
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0f32; xs.len()];
    let mut y = Array4::<f32>::zeros(x.dim());
    let ys = y.as_slice_mut().expect("contiguous");
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                ys[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, xhat, inv_std, mean, var)
}

impl Network {
    pub fn new(graph: LayerGraph, seed: u64) -> Result<Self> {
        graph.validate()?;
        let params = ParamStore::init(&graph, seed);
        Ok(Self { graph, params })
    }

    pub fn from_parts(graph: LayerGraph, params: ParamStore) -> Result<Self> {
        graph.validate()?;
        if params.slots.len() != graph.len() {
            return Err(NnError::ParamMismatch(format!(
                "{} parameter slots for {} nodes",
                params.slots.len(),
                graph.len()
            )));
        }
        let fresh = ParamStore::init(&graph, 0);
        let shapes_match = fresh.params.len() == params.params.len()
            && fresh
                .params
                .iter()
                .zip(&params.params)
                .all(|(a, b)| a.shape == b.shape && b.value.len() == a.value.len());
        if !shapes_match || fresh.slots != params.slots {
            return Err(NnError::ParamMismatch("parameter shapes differ from the graph".into()));
        }
        Ok(Self { graph, params })
    }

    pub fn num_classes(&self) -> usize {
        self.graph
            .nodes()
            .iter()
            .rev()
            .find_map(|n| match n.kind {
                LayerKind::Linear { out_features, .. } => Some(out_features),
                _ => None,
            })
            .unwrap_or_default()
    }

    /// Eval-mode logits `(batch, classes)`; batchnorm uses running statistics.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let mut stats = None;
        let (acts, _) = self.run(x, Mode::Eval, &mut stats)?;
        Ok(logits_of(acts.last().expect("nonempty graph")))
    }

    /// Train-mode forward. Updates batchnorm running statistics and returns
    /// the tape needed by [`Network::backward`].
    pub fn forward_train(&mut self, x: &Array4<f32>) -> Result<(Array2<f32>, Tape)> {
        let mut stats = Some(std::mem::take(&mut self.params.bn_stats));
        let result = self.run(x, Mode::Train, &mut stats);
        self.params.bn_stats = stats.expect("stats returned");
        let (activations, caches) = result?;
        let logits = logits_of(activations.last().expect("nonempty graph"));
        Ok((logits, Tape { activations, caches }))
    }

    fn run(
        &self,
        x: &Array4<f32>,
        mode: Mode,
        stats: &mut Option<Vec<BnStats>>,
    ) -> Result<(Vec<Array4<f32>>, Vec<Cache>)> {
        let (batch, c, h, w) = x.dim();
        if batch == 0 {
            return Err(NnError::EmptyBatch);
        }
        let nodes = self.graph.nodes();
        let shapes = self.graph.infer_shapes((h, w))?;
        let inputs = self.graph.input_indices();
        let mut last_use = vec![0usize; nodes.len()];
        for (i, ins) in inputs.iter().enumerate() {
            for &j in ins {
                last_use[j] = i;
            }
        }
        let empty = || Array4::<f32>::zeros((0, 0, 0, 0));
        let mut acts: Vec<Array4<f32>> = Vec::with_capacity(nodes.len());
        let mut caches: Vec<Cache> = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let ins = &inputs[i];
            let arg = |k: usize| &acts[ins[k]];
            let mut cache = Cache::None;
            let out = match node.kind {
                LayerKind::Input { channels } => {
                    if c != channels {
                        return Err(NnError::InputChannels {
                            expected: channels,
                            got: c,
                        });
                    }
                    x.as_standard_layout().into_owned()
                }
                LayerKind::Conv2d { out_channels, .. } | LayerKind::PointwiseConv2d { out_channels, .. } => {
                    let g = conv_geom(&node.kind, shape_of(arg(0)), shapes[i]).expect("conv");
                    conv_forward(arg(0), self.params.weight(i), self.params.bias(i), &g, out_channels)
                }
                LayerKind::DepthwiseConv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let s_in = shape_of(arg(0));
                    let g = DwGeom {
                        c: channels,
                        h: s_in.height,
                        w: s_in.width,
                        k: kernel,
                        stride,
                        pad: padding,
                        ho: shapes[i].height,
                        wo: shapes[i].width,
                    };
                    let wt = self.params.weight(i);
                    let xs = dense(arg(0));
                    let mut y = Array4::<f32>::zeros((batch, channels, g.ho, g.wo));
                    let ys = y.as_slice_mut().expect("contiguous");
                    for b in 0..batch {
                        for ch in 0..channels {
                            g.for_each_tap(b, ch, |o, inp, wi| ys[o] += wt[wi] * xs[inp]);
                        }
                    }
                    if let Some(bias) = self.params.bias(i) {
                        let hw = g.ho * g.wo;
                        for (k, v) in ys.iter_mut().enumerate() {
                            *v += bias[(k / hw) % channels];
                        }
                    }
                    y
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let xv = ArrayView2::from_shape((batch, in_features), dense(arg(0))).expect("flat");
                    let wv = ArrayView2::from_shape((out_features, in_features), self.params.weight(i)).expect("w");
                    let mut y = Array2::<f32>::zeros((batch, out_features));
                    general_mat_mul(1.0, &xv, &wv.t(), 0.0, &mut y);
                    if let Some(bias) = self.params.bias(i) {
                        for mut row in y.outer_iter_mut() {
                            for (v, b) in row.iter_mut().zip(bias) {
                                *v += b;
                            }
                        }
                    }
                    y.into_shape_with_order((batch, out_features, 1, 1)).expect("reshape")
                }
                LayerKind::BatchNorm { channels } => {
                    let gamma = self.params.weight(i);
                    let beta = self.params.bias(i).expect("beta");
                    let stat_idx = self.params.slots[i].stats.expect("bn stats");
                    match (mode, stats.as_mut()) {
                        (Mode::Train, Some(all)) => {
                            let (y, xhat, inv_std, mean, var) = bn_train(arg(0), gamma, beta);
                            let m = (batch * shapes[i].spatial()) as f32;
                            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                            let s = &mut all[stat_idx];
                            for ch in 0..channels {
                                s.mean[ch] = (1.0 - BN_MOMENTUM) * s.mean[ch] + BN_MOMENTUM * mean[ch];
                                s.var[ch] = (1.0 - BN_MOMENTUM) * s.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                            }
                            cache = Cache::Bn { xhat, inv_std };
                            y
                        }
                        _ => {
                            let s = &self.params.bn_stats[stat_idx];
                            let hw = shapes[i].spatial();
                            let mut y = arg(0).as_standard_layout().into_owned();
                            let ys = y.as_slice_mut().expect("contiguous");
                            for (k, v) in ys.iter_mut().enumerate() {
                                let ch = (k / hw) % channels;
                                *v = gamma[ch] * (*v - s.mean[ch]) / (s.var[ch] + BN_EPS).sqrt() + beta[ch];
                            }
                            y
                        }
                    }
                }
                LayerKind::Relu => arg(0).mapv(|v| v.max(0.0)),
                LayerKind::MaxPool { kernel, stride } => {
                    let s_in = shape_of(arg(0));
                    let so = shapes[i];
                    let xs = dense(arg(0));
                    let mut y = Array4::<f32>::zeros((batch, so.channels, so.height, so.width));
                    let mut argmax = vec![0u32; y.len()];
                    let ys = y.as_slice_mut().expect("contiguous");
                    for plane in 0..batch * so.channels {
                        let ib = plane * s_in.spatial();
                        let ob = plane * so.spatial();
                        for oy in 0..so.height {
                            for ox in 0..so.width {
                                let mut best = f32::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let idx = ib + (oy * stride + ky) * s_in.width + ox * stride + kx;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                ys[ob + oy * so.width + ox] = best;
                                argmax[ob + oy * so.width + ox] = best_idx as u32;
                            }
                        }
                    }
                    if mode == Mode::Train {
                        cache = Cache::MaxPool { argmax };
                    }
                    y
                }
                LayerKind::AvgPoolGlobal => {
                    let s_in = shape_of(arg(0));
                    let hw = s_in.spatial();
                    let xs = dense(arg(0));
                    let mut y = Array4::<f32>::zeros((batch, s_in.channels, 1, 1));
                    for (k, v) in y.iter_mut().enumerate() {
                        *v = xs[k * hw..(k + 1) * hw].iter().sum::<f32>() / hw as f32;
                    }
                    y
                }
                LayerKind::Concat => {
                    let so = shapes[i];
                    let hw = so.spatial();
                    let mut y = Array4::<f32>::zeros((batch, so.channels, so.height, so.width));
                    let ys = y.as_slice_mut().expect("contiguous");
                    let mut offset = 0;
                    for k in 0..ins.len() {
                        let part = arg(k);
                        let pc = part.dim().1;
                        let ps = dense(part);
                        for b in 0..batch {
                            let dst = (b * so.channels + offset) * hw;
                            ys[dst..dst + pc * hw].copy_from_slice(&ps[b * pc * hw..(b + 1) * pc * hw]);
                        }
                        offset += pc;
                    }
                    y
                }
                LayerKind::Add => {
                    let so = shapes[i];
                    let hw = so.spatial();
                    let mut y = Array4::<f32>::zeros((batch, so.channels, so.height, so.width));
                    let ys = y.as_slice_mut().expect("contiguous");
                    for k in 0..2 {
                        let part = dense(arg(k));
                        if part.len() == ys.len() {
                            for (d, s) in ys.iter_mut().zip(part) {
                                *d += s;
                            }
                        } else {
                            for (idx, d) in ys.iter_mut().enumerate() {
                                *d += part[idx / hw];
                            }
                        }
                    }
                    y
                }
                LayerKind::SoftmaxHead => arg(0).clone(),
            };
            acts.push(out);
            caches.push(cache);
            if mode == Mode::Eval {
                for &j in ins {
                    if last_use[j] == i {
                        acts[j] = empty();
                    }
                }
            }
        }
        Ok((acts, caches))
    }

    /// Parameter gradients for an upstream gradient on the logits.
    pub fn backward(&self, tape: &Tape, dlogits: ArrayView2<'_, f32>) -> Result<Vec<Vec<f32>>> {
        let nodes = self.graph.nodes();
        let acts = &tape.activations;
        let out = acts.last().expect("nonempty graph");
        let (batch, classes) = (out.dim().0, out.dim().1);
        if dlogits.dim() != (batch, classes) {
            return Err(NnError::GradShape {
                expected: (batch, classes),
                got: dlogits.dim(),
            });
        }
        let inputs = self.graph.input_indices();
        let mut grads = self.params.zeros_like();
        let mut dacts: Vec<Option<Array4<f32>>> = (0..nodes.len()).map(|_| None).collect();
        dacts[nodes.len() - 1] = Some(
            dlogits
                .to_owned()
                .into_shape_with_order((batch, classes, 1, 1))
                .expect("reshape"),
        );
        let accumulate = |dacts: &mut Vec<Option<Array4<f32>>>, j: usize, g: Array4<f32>| {
            if matches!(nodes[j].kind, LayerKind::Input { .. }) {
                return;
            }
            match &mut dacts[j] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        let needs_dx = |j: usize| !matches!(nodes[j].kind, LayerKind::Input { .. });
        for i in (0..nodes.len()).rev() {
            let Some(dy) = dacts[i].take() else { continue };
            let ins = &inputs[i];
            let slots = self.params.slots[i];
            match nodes[i].kind {
                LayerKind::Input { .. } => {}
                LayerKind::Conv2d { out_channels, .. } | LayerKind::PointwiseConv2d { out_channels, .. } => {
                    let xin = &acts[ins[0]];
                    let g = conv_geom(&nodes[i].kind, shape_of(xin), shape_of(&dy)).expect("conv");
                    let wi = slots.weight.expect("weight");
                    let (dweight, dbias) = split_two(&mut grads, wi, slots.bias);
                    let dx = conv_backward(
                        xin,
                        &dy,
                        self.params.weight(i),
                        &g,
                        out_channels,
                        dweight,
                        dbias,
                        needs_dx(ins[0]),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut dacts, ins[0], dx);
                    }
                }
                LayerKind::DepthwiseConv2d {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let xin = &acts[ins[0]];
                    let s_in = shape_of(xin);
                    let s_out = shape_of(&dy);
                    let g = DwGeom {
                        c: channels,
                        h: s_in.height,
                        w: s_in.width,
                        k: kernel,
                        stride,
                        pad: padding,
                        ho: s_out.height,
                        wo: s_out.width,
                    };
                    let wt = self.params.weight(i);
                    let xs = dense(xin);
                    let dys = dense(&dy);
                    let want_dx = needs_dx(ins[0]);
                    let mut dx = Array4::<f32>::zeros(xin.dim());
                    {
                        let (dweight, dbias) = split_two(&mut grads, slots.weight.expect("weight"), slots.bias);
                        let dxs = dx.as_slice_mut().expect("contiguous");
                        for b in 0..batch {
                            for ch in 0..channels {
                                g.for_each_tap(b, ch, |o, inp, wi| {
                                    dweight[wi] += dys[o] * xs[inp];
                                    if want_dx {
                                        dxs[inp] += dys[o] * wt[wi];
                                    }
                                });
                            }
                        }
                        if let Some(db) = dbias {
                            let hw = g.ho * g.wo;
                            for (k, v) in dys.iter().enumerate() {
                                db[(k / hw) % channels] += v;
                            }
                        }
                    }
                    if want_dx {
                        accumulate(&mut dacts, ins[0], dx);
                    }
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let xin = &acts[ins[0]];
                    let xv = ArrayView2::from_shape((batch, in_features), dense(xin)).expect("flat");
                    let dyv = ArrayView2::from_shape((batch, out_features), dense(&dy)).expect("dy");
                    let (dweight, dbias) = split_two(&mut grads, slots.weight.expect("weight"), slots.bias);
                    let mut dw = ArrayViewMut2::from_shape((out_features, in_features), dweight).expect("dw");
                    general_mat_mul(1.0, &dyv.t(), &xv, 1.0, &mut dw);
                    if let Some(db) = dbias {
                        for row in dyv.outer_iter() {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                    if needs_dx(ins[0]) {
                        let wv = ArrayView2::from_shape((out_features, in_features), self.params.weight(i))
                            .expect("w");
                        let mut dx2 = Array2::<f32>::zeros((batch, in_features));
                        general_mat_mul(1.0, &dyv, &wv, 0.0, &mut dx2);
                        let dx = dx2.into_shape_with_order(xin.dim()).expect("reshape");
                        accumulate(&mut dacts, ins[0], dx);
                    }
                }
                LayerKind::BatchNorm { channels } => {
                    let Cache::Bn { xhat, inv_std } = &tape.caches[i] else {
                        unreachable!("batchnorm cache missing")
                    };
                    let hw = shape_of(&dy).spatial();
                    let m = (batch * hw) as f32;
                    let dys = dense(&dy);
                    let gamma = self.params.weight(i);
                    let mut sum_dy = vec![0.0f32; channels];
                    let mut sum_dy_xhat = vec![0.0f32; channels];
                    for (k, (&d, &xh)) in dys.iter().zip(xhat).enumerate() {
                        let ch = (k / hw) % channels;
                        sum_dy[ch] += d;
                        sum_dy_xhat[ch] += d * xh;
                    }
                    {
                        let (dgamma, dbeta) = split_two(&mut grads, slots.weight.expect("gamma"), slots.bias);
                        for ch in 0..channels {
                            dgamma[ch] += sum_dy_xhat[ch];
                        }
                        if let Some(db) = dbeta {
                            for ch in 0..channels {
                                db[ch] += sum_dy[ch];
                            }
                        }
                    }
                    if needs_dx(ins[0]) {
                        let mut dx = Array4::<f32>::zeros(dy.dim());
                        let dxs = dx.as_slice_mut().expect("contiguous");
                        for (k, v) in dxs.iter_mut().enumerate() {
                            let ch = (k / hw) % channels;
                            *v = gamma[ch] * inv_std[ch] / m
                                * (m * dys[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch]);
                        }
                        accumulate(&mut dacts, ins[0], dx);
                    }
                }
                LayerKind::Relu => {
                    let y = &acts[i];
                    let mut dx = dy;
                    dx.zip_mut_with(y, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut dacts, ins[0], dx);
                }
                LayerKind::MaxPool { .. } => {
                    let Cache::MaxPool { argmax } = &tape.caches[i] else {
                        unreachable!("maxpool cache missing")
                    };
                    let mut dx = Array4::<f32>::zeros(acts[ins[0]].dim());
                    let dxs = dx.as_slice_mut().expect("contiguous");
                    for (&src, &d) in argmax.iter().zip(dense(&dy)) {
                        dxs[src as usize] += d;
                    }
                    accumulate(&mut dacts, ins[0], dx);
                }
                LayerKind::AvgPoolGlobal => {
                    let dim = acts[ins[0]].dim();
                    let hw = dim.2 * dim.3;
                    let dys = dense(&dy);
                    let mut dx = Array4::<f32>::zeros(dim);
                    let dxs = dx.as_slice_mut().expect("contiguous");
                    for (k, v) in dxs.iter_mut().enumerate() {
                        *v = dys[k / hw] / hw as f32;
                    }
                    accumulate(&mut dacts, ins[0], dx);
                }
                LayerKind::Concat => {
                    let (_, total_c, h, w) = dy.dim();
                    let hw = h * w;
                    let dys = dense(&dy);
                    let mut offset = 0;
                    for &j in ins {
                        let pc = acts[j].dim().1;
                        if needs_dx(j) {
                            let mut part = Array4::<f32>::zeros((batch, pc, h, w));
                            let ps = part.as_slice_mut().expect("contiguous");
                            for b in 0..batch {
                                let src = (b * total_c + offset) * hw;
                                ps[b * pc * hw..(b + 1) * pc * hw].copy_from_slice(&dys[src..src + pc * hw]);
                            }
                            accumulate(&mut dacts, j, part);
                        }
                        offset += pc;
                    }
                }
                LayerKind::Add => {
                    let hw = shape_of(&dy).spatial();
                    for &j in ins {
                        let dim = acts[j].dim();
                        if dim == dy.dim() {
                            accumulate(&mut dacts, j, dy.clone());
                        } else {
                            let mut reduced = Array4::<f32>::zeros(dim);
                            let rs = reduced.as_slice_mut().expect("contiguous");
                            for (k, v) in dense(&dy).iter().enumerate() {
                                rs[k / hw] += v;
                            }
                            accumulate(&mut dacts, j, reduced);
                        }
                    }
                }
                LayerKind::SoftmaxHead => accumulate(&mut dacts, ins[0], dy),
            }
        }
        Ok(grads)
    }
}

fn split_two(grads: &mut [Vec<f32>], first: usize, second: Option<usize>) -> (&mut [f32], Option<&mut [f32]>) {
    match second {
        None => (grads[first].as_mut_slice(), None),
        Some(s) => {
            assert!(s > first, "bias follows weight");
            let (lo, hi) = grads.split_at_mut(s);
            (lo[first].as_mut_slice(), Some(hi[0].as_mut_slice()))
        }
    }
}

fn logits_of(out: &Array4<f32>) -> Array2<f32> {
    let (batch, classes, h, w) = out.dim();
    out.as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, classes * h * w))
        .expect("reshape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind as K;
    use rand::Rng;

    /// A graph exercising every layer kind.
    fn kitchen_sink() -> LayerGraph {
        let mut g = LayerGraph::new();
        g.add("input", K::Input { channels: 2 }, &[]).unwrap();
        g.add("conv", K::conv(2, 4, 3, 1, true), &["input"]).unwrap();
        g.add("bn", K::BatchNorm { channels: 4 }, &["conv"]).unwrap();
        g.add(
            "dw",
            K::DepthwiseConv2d {
                channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            },
            &["bn"],
        )
        .unwrap();
        g.add(
            "pw",
            K::PointwiseConv2d {
                in_channels: 2,
                out_channels: 4,
                stride: 2,
                bias: false,
            },
            &["input"],
        )
        .unwrap();
        g.add("gap", K::AvgPoolGlobal, &["pw"]).unwrap();
        g.add("mix", K::Add, &["dw", "gap"]).unwrap();
        g.add("relu", K::Relu, &["mix"]).unwrap();
        g.add("cat", K::Concat, &["relu", "pw"]).unwrap();
        g.add("pool", K::MaxPool { kernel: 2, stride: 2 }, &["cat"]).unwrap();
        g.add(
            "fc",
            K::Linear {
                in_features: 8 * 2 * 2,
                out_features: 3,
                bias: true,
            },
            &["pool"],
        )
        .unwrap();
        g.add("head", K::SoftmaxHead, &["fc"]).unwrap();
        g
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar objective `sum(weights * logits)` in f64 with BN in train mode.
    fn objective(net: &Network, x: &Array4<f32>, weights: &Array2<f32>) -> f64 {
        let mut copy = net.clone();
        let (logits, _) = copy.forward_train(x).unwrap();
        logits
            .iter()
            .zip(weights.iter())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let graph = kitchen_sink();
        let mut net = Network::new(graph, 3).unwrap();
        // Perturb batchnorm affine terms away from (1, 0).
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in net.params.params.iter_mut() {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let x = random_input((3, 2, 8, 8), 1);
        let weights = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut train = net.clone();
        let (_, tape) = train.forward_train(&x).unwrap();
        let grads = net.backward(&tape, weights.view()).unwrap();

        let h = 1e-3f32;
        let mut checked = 0;
        let mut failures = Vec::new();
        for (pi, param) in net.params.params.iter().enumerate() {
            for k in 0..param.value.len() {
                let mut plus = net.clone();
                plus.params.params[pi].value[k] += h;
                let mut minus = net.clone();
                minus.params.params[pi].value[k] -= h;
                let numeric = (objective(&plus, &x, &weights) - objective(&minus, &x, &weights)) / (2.0 * f64::from(h));
                let analytic = f64::from(grads[pi][k]);
                let scale = numeric.abs().max(analytic.abs()).max(1e-2);
                if (numeric - analytic).abs() / scale >= 3e-2 {
                    failures.push(format!("{}[{k}]: numeric {numeric} analytic {analytic}", param.name));
                }
                checked += 1;
            }
        }
        assert!(failures.is_empty(), "{failures:#?}");
        assert!(checked > 50);
    }

    #[test]
    fn running_stats_converge_to_batch_stats() {
        let mut g = LayerGraph::new();
        g.add("input", K::Input { channels: 1 }, &[]).unwrap();
        g.add("bn", K::BatchNorm { channels: 1 }, &["input"]).unwrap();
        g.add("gap", K::AvgPoolGlobal, &["bn"]).unwrap();
        g.add(
            "fc",
            K::Linear {
                in_features: 1,
                out_features: 2,
                bias: false,
            },
            &["gap"],
        )
        .unwrap();
        let mut net = Network::new(g, 0).unwrap();
        let x = random_input((4, 1, 3, 3), 2);
        for _ in 0..200 {
            net.forward_train(&x).unwrap();
        }
        let vals: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let unbiased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let stats = &net.params.bn_stats[0];
        assert!((f64::from(stats.mean[0]) - mean).abs() < 1e-5);
        assert!((f64::from(stats.var[0]) - unbiased).abs() < 1e-5);
        // Eval mode normalizes with these statistics.
        let eval = net.forward(&x).unwrap();
        let w = &net.params.params[2].value;
        for b in 0..4 {
            let sample_mean = x.slice(ndarray::s![b, 0, .., ..]).iter().map(|&v| f64::from(v)).sum::<f64>() / 9.0;
            let normed = (sample_mean - f64::from(stats.mean[0])) / (f64::from(stats.var[0]) + f64::from(BN_EPS)).sqrt();
            for k in 0..2 {
                assert!((f64::from(eval[[b, k]]) - f64::from(w[k]) * normed).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut g = LayerGraph::new();
        g.add("input", K::Input { channels: 3 }, &[]).unwrap();
        g.add(
            "conv",
            K::Conv2d {
                in_channels: 3,
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 1,
                bias: true,
            },
            &["input"],
        )
        .unwrap();
        let mut net = Network::new(g, 5).unwrap();
        net.params.params[1].value = vec![0.5, -0.25];
        let x = random_input((2, 3, 5, 6), 4);
        let y = conv_forward(
            &x,
            net.params.weight(1),
            net.params.bias(1),
            &ConvGeom {
                c_in: 3,
                h: 5,
                w: 6,
                kernel: 3,
                stride: 2,
                pad: 1,
                ho: 3,
                wo: 3,
            },
            2,
        );
        let w = &net.params.params[0].value;
        for b in 0..2 {
            for o in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = net.params.params[1].value[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                        acc += w[((o * 3 + c) * 3 + ky) * 3 + kx] * x[[b, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[b, o, oy, ox]] - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::new(kitchen_sink(), 11).unwrap();
        let b = Network::new(kitchen_sink(), 11).unwrap();
        let c = Network::new(kitchen_sink(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_wrong_input() {
        let net = Network::new(kitchen_sink(), 0).unwrap();
        assert!(matches!(
            net.forward(&Array4::zeros((1, 3, 8, 8))),
            Err(NnError::InputChannels { .. })
        ));
        assert!(matches!(net.forward(&Array4::zeros((0, 2, 8, 8))), Err(NnError::EmptyBatch)));
        assert!(net.forward(&Array4::zeros((1, 2, 2, 2))).is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let net = Network::new(kitchen_sink(), 0).unwrap();
        assert!(Network::from_parts(net.graph.clone(), net.params.clone()).is_ok());
        let mut params = net.params.clone();
        params.params[0].shape[0] += 1;
        assert!(Network::from_parts(net.graph.clone(), params).is_err());
    }
}
