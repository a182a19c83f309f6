//! Minimal feed-forward network engine: spec validation, forward pass with
//! per-layer activation capture, a small deterministic SGD trainer for
//! fixture models, and the AGMF model file format.
//!
//! All arithmetic runs in f64 internally; tensors cross the API as f32.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

pub const MODEL_MAGIC: &[u8; 4] = b"AGMF";
pub const MODEL_VERSION: u32 = 1;

static FORWARD_CALLS: AtomicU64 = AtomicU64::new(0);

/// Total number of forward() invocations in this process. Tests use this to
/// check that a pipeline runs one inference per case per stage.
pub fn forward_call_count() -> u64 {
    FORWARD_CALLS.load(Ordering::Relaxed)
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2D {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// Neuron count of a trainable layer: dense units, or conv filters.
    pub fn neuron_count(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
            LayerSpec::Conv2D { out_ch, .. } => Some(*out_ch),
            _ => None,
        }
    }
}

/// Shape flowing between layers: a flat vector or an H×W×C map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataShape {
    Vector(usize),
    Map { h: usize, w: usize, c: usize },
}

impl DataShape {
    pub fn from_dims(dims: &[usize]) -> Result<Self, NnError> {
        match dims {
            [d] => Ok(DataShape::Vector(*d)),
            [h, w, c] => Ok(DataShape::Map {
                h: *h,
                w: *w,
                c: *c,
            }),
            other => Err(NnError::ShapeMismatch(format!(
                "expected rank-1 or rank-3 case shape, got {other:?}"
            ))),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            DataShape::Vector(d) => vec![*d],
            DataShape::Map { h, w, c } => vec![*h, *w, *c],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DataShape::Vector(d) => *d,
            DataShape::Map { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: u32,
}

impl ModelSpec {
    /// Checks layer composition: shapes must chain, exactly one terminal
    /// Softmax, at least one trainable layer, output width == num_classes.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("model has no layers".into()));
        }
        let softmax_count = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Softmax))
            .count();
        if softmax_count != 1 || !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(NnError::InvalidSpec(
                "model must end with exactly one Softmax".into(),
            ));
        }
        if !self.layers.iter().any(LayerSpec::is_trainable) {
            return Err(NnError::InvalidSpec(
                "model needs at least one trainable layer".into(),
            ));
        }
        let out = self.output_shape()?;
        match out {
            DataShape::Vector(d) if d == self.num_classes as usize => Ok(()),
            other => Err(NnError::InvalidSpec(format!(
                "output shape {other:?} does not match {} classes",
                self.num_classes
            ))),
        }
    }

    pub fn output_shape(&self) -> Result<DataShape, NnError> {
        let mut shape = DataShape::from_dims(&self.input_shape)?;
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = layer_output_shape(layer, &shape)
                .map_err(|e| NnError::InvalidSpec(format!("layer {idx} ({layer:?}): {e}")))?;
        }
        Ok(shape)
    }

    pub fn trainable_layers(&self) -> Vec<&LayerSpec> {
        self.layers.iter().filter(|l| l.is_trainable()).collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.layers.iter().filter(|l| l.is_trainable()).count()
    }

    /// Input shape seen by each trainable layer, in layer order.
    pub fn trainable_input_shapes(&self) -> Result<Vec<DataShape>, NnError> {
        let mut shape = DataShape::from_dims(&self.input_shape)?;
        let mut shapes = Vec::new();
        for layer in &self.layers {
            if layer.is_trainable() {
                shapes.push(shape.clone());
            }
            shape = layer_output_shape(layer, &shape)?;
        }
        Ok(shapes)
    }
}

fn layer_output_shape(layer: &LayerSpec, input: &DataShape) -> Result<DataShape, NnError> {
    match (layer, input) {
        (LayerSpec::Dense { in_dim, out_dim }, DataShape::Vector(d)) => {
            if d != in_dim {
                return Err(NnError::ShapeMismatch(format!(
                    "dense expects {in_dim} inputs, got {d}"
                )));
            }
            Ok(DataShape::Vector(*out_dim))
        }
        (
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
            },
            DataShape::Map { h, w, c },
        ) => {
            if c != in_ch {
                return Err(NnError::ShapeMismatch(format!(
                    "conv expects {in_ch} channels, got {c}"
                )));
            }
            if *stride == 0 {
                return Err(NnError::InvalidSpec("conv stride must be > 0".into()));
            }
            let ph = h + 2 * padding;
            let pw = w + 2 * padding;
            if ph < *kh || pw < *kw {
                return Err(NnError::ShapeMismatch(format!(
                    "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
                )));
            }
            Ok(DataShape::Map {
                h: (ph - kh) / stride + 1,
                w: (pw - kw) / stride + 1,
                c: *out_ch,
            })
        }
        (LayerSpec::MaxPool { k, stride }, DataShape::Map { h, w, c }) => {
            if *k == 0 || *stride == 0 {
                return Err(NnError::InvalidSpec("pool size/stride must be > 0".into()));
            }
            if h < k || w < k {
                return Err(NnError::ShapeMismatch(format!(
                    "pool window {k} larger than input {h}x{w}"
                )));
            }
            Ok(DataShape::Map {
                h: (h - k) / stride + 1,
                w: (w - k) / stride + 1,
                c: *c,
            })
        }
        (LayerSpec::Flatten, DataShape::Map { h, w, c }) => Ok(DataShape::Vector(h * w * c)),
        (LayerSpec::Flatten, DataShape::Vector(d)) => Ok(DataShape::Vector(*d)),
        (LayerSpec::Relu, shape) => Ok(shape.clone()),
        (LayerSpec::Softmax, DataShape::Vector(d)) => Ok(DataShape::Vector(*d)),
        (layer, input) => Err(NnError::ShapeMismatch(format!(
            "layer {layer:?} cannot consume shape {input:?}"
        ))),
    }
}

/// Kernel + bias for one trainable layer.
/// Dense kernel is [in, out]; Conv2D kernel is [kh, kw, in_ch, out_ch].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layers: Vec<TrainableWeights>,
}

impl LayerWeights {
    pub fn check_against(&self, spec: &ModelSpec) -> Result<(), NnError> {
        let trainables = spec.trainable_layers();
        if trainables.len() != self.layers.len() {
            return Err(NnError::InvalidSpec(format!(
                "spec has {} trainable layers, weights have {}",
                trainables.len(),
                self.layers.len()
            )));
        }
        let input_shapes = spec.trainable_input_shapes()?;
        for ((layer, weights), input) in trainables.iter().zip(&self.layers).zip(&input_shapes) {
            let expected_kernel: Vec<usize> = match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    if input.len() != *in_dim {
                        return Err(NnError::ShapeMismatch(format!(
                            "dense in_dim {in_dim} vs incoming {}",
                            input.len()
                        )));
                    }
                    vec![*in_dim, *out_dim]
                }
                LayerSpec::Conv2D {
                    in_ch,
                    out_ch,
                    kh,
                    kw,
                    ..
                } => vec![*kh, *kw, *in_ch, *out_ch],
                _ => unreachable!(),
            };
            if weights.kernel.shape() != expected_kernel.as_slice() {
                return Err(NnError::ShapeMismatch(format!(
                    "kernel shape {:?}, expected {expected_kernel:?}",
                    weights.kernel.shape()
                )));
            }
            let out = layer.neuron_count().unwrap();
            if weights.bias.shape() != [out] {
                return Err(NnError::ShapeMismatch(format!(
                    "bias shape {:?}, expected [{out}]",
                    weights.bias.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Post-nonlinearity outputs of every trainable layer for one case.
/// The final layer's entry holds the softmax probabilities.
#[derive(Debug, Clone)]
pub struct ActivationCapture {
    pub layers: Vec<(Vec<usize>, Vec<f32>)>,
}

impl ActivationCapture {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

// f64 working copies used by forward/backward.
struct Weights64 {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Weights64 {
    fn from_public(w: &LayerWeights) -> Self {
        Self {
            layers: w
                .layers
                .iter()
                .map(|tw| {
                    (
                        tw.kernel.data().iter().map(|&v| v as f64).collect(),
                        tw.bias.data().iter().map(|&v| v as f64).collect(),
                    )
                })
                .collect(),
        }
    }

    fn to_public(&self, spec: &ModelSpec) -> Result<LayerWeights, NnError> {
        let input_shapes = spec.trainable_input_shapes()?;
        let mut out = Vec::new();
        for ((layer, (kernel, bias)), input) in spec
            .trainable_layers()
            .iter()
            .zip(&self.layers)
            .zip(&input_shapes)
        {
            let kshape = match layer {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let _ = input;
                    vec![*in_dim, *out_dim]
                }
                LayerSpec::Conv2D {
                    in_ch,
                    out_ch,
                    kh,
                    kw,
                    ..
                } => vec![*kh, *kw, *in_ch, *out_ch],
                _ => unreachable!(),
            };
            let bshape = vec![layer.neuron_count().unwrap()];
            out.push(TrainableWeights {
                kernel: Tensor::new(kshape, kernel.iter().map(|&v| v as f32).collect())?,
                bias: Tensor::new(bshape, bias.iter().map(|&v| v as f32).collect())?,
            });
        }
        Ok(LayerWeights { layers: out })
    }
}

// One layer's forward artifacts kept for backprop.
enum Tape {
    Dense {
        input: Vec<f64>,
    },
    Conv {
        input: Vec<f64>,
        in_shape: (usize, usize, usize),
        out_shape: (usize, usize, usize),
    },
    MaxPool {
        argmax: Vec<usize>,
        in_len: usize,
    },
    Flatten,
    Relu {
        mask: Vec<bool>,
    },
    Softmax {
        probs: Vec<f64>,
    },
}

struct ForwardState {
    output: Vec<f64>,
    tapes: Vec<Tape>,
    // (shape, post-nonlinearity values) per trainable layer
    captures: Vec<(Vec<usize>, Vec<f64>)>,
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    in_shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_shape: (usize, usize, usize),
) -> Vec<f64> {
    let (h, w, c_in) = in_shape;
    let (oh, ow, c_out) = out_shape;
    let mut out = vec![0.0; oh * ow * c_out];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..c_out {
                let mut acc = bias[co];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            let iv = input[(iy as usize * w + ix as usize) * c_in + ci];
                            let kv = kernel[((ky * kw + kx) * c_in + ci) * c_out + co];
                            acc += iv * kv;
                        }
                    }
                }
                out[(oy * ow + ox) * c_out + co] = acc;
            }
        }
    }
    out
}

fn forward_f64(
    spec: &ModelSpec,
    weights: &Weights64,
    case: &[f64],
    want_tape: bool,
) -> Result<ForwardState, NnError> {
    let mut shape = DataShape::from_dims(&spec.input_shape)?;
    if case.len() != shape.len() {
        return Err(NnError::ShapeMismatch(format!(
            "input length {} does not match model input {:?}",
            case.len(),
            spec.input_shape
        )));
    }
    let mut value: Vec<f64> = case.to_vec();
    let mut tapes = Vec::new();
    let mut captures: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    // trainable layer whose capture is still the raw output and may be
    // upgraded by a following nonlinearity
    let mut pending_capture: Option<usize> = None;
    let mut trainable_idx = 0usize;

    for layer in &spec.layers {
        let out_shape = layer_output_shape(layer, &shape)?;
        match layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let (kernel, bias) = &weights.layers[trainable_idx];
                let mut out = vec![0.0; *out_dim];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = bias[i];
                    for j in 0..*in_dim {
                        acc += value[j] * kernel[j * out_dim + i];
                    }
                    *o = acc;
                }
                if want_tape {
                    tapes.push(Tape::Dense {
                        input: std::mem::take(&mut value),
                    });
                }
                captures.push((out_shape.dims(), out.clone()));
                pending_capture = Some(trainable_idx);
                trainable_idx += 1;
                value = out;
            }
            LayerSpec::Conv2D {
                kh,
                kw,
                stride,
                padding,
                ..
            } => {
                let (kernel, bias) = &weights.layers[trainable_idx];
                let in_dims = match &shape {
                    DataShape::Map { h, w, c } => (*h, *w, *c),
                    _ => unreachable!(),
                };
                let out_dims = match &out_shape {
                    DataShape::Map { h, w, c } => (*h, *w, *c),
                    _ => unreachable!(),
                };
                let out = conv_forward(
                    &value, kernel, bias, in_dims, *kh, *kw, *stride, *padding, out_dims,
                );
                if want_tape {
                    tapes.push(Tape::Conv {
                        input: std::mem::take(&mut value),
                        in_shape: in_dims,
                        out_shape: out_dims,
                    });
                }
                captures.push((out_shape.dims(), out.clone()));
                pending_capture = Some(trainable_idx);
                trainable_idx += 1;
                value = out;
            }
            LayerSpec::MaxPool { k, stride } => {
                let (h, w, c) = match &shape {
                    DataShape::Map { h, w, c } => (*h, *w, *c),
                    _ => unreachable!(),
                };
                let (oh, ow, _) = match &out_shape {
                    DataShape::Map { h, w, c } => (*h, *w, *c),
                    _ => unreachable!(),
                };
                let mut out = vec![0.0; oh * ow * c];
                let mut argmax = vec![0usize; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    if iy >= h || ix >= w {
                                        continue;
                                    }
                                    let idx = (iy * w + ix) * c + ch;
                                    if value[idx] > best {
                                        best = value[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = best;
                            argmax[(oy * ow + ox) * c + ch] = best_idx;
                        }
                    }
                }
                if want_tape {
                    tapes.push(Tape::MaxPool {
                        argmax,
                        in_len: value.len(),
                    });
                }
                value = out;
            }
            LayerSpec::Flatten => {
                if want_tape {
                    tapes.push(Tape::Flatten);
                }
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = value.iter().map(|&v| v > 0.0).collect();
                for v in &mut value {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                if let Some(t) = pending_capture.take() {
                    captures[t] = (out_shape.dims(), value.clone());
                }
                if want_tape {
                    tapes.push(Tape::Relu { mask });
                }
            }
            LayerSpec::Softmax => {
                let max = value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in &mut value {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in &mut value {
                    *v /= sum;
                }
                if let Some(t) = pending_capture.take() {
                    captures[t] = (out_shape.dims(), value.clone());
                }
                if want_tape {
                    tapes.push(Tape::Softmax {
                        probs: value.clone(),
                    });
                }
            }
        }
        shape = out_shape;
    }

    Ok(ForwardState {
        output: value,
        tapes,
        captures,
    })
}

/// Runs one case through the network. Returns class probabilities and the
/// post-nonlinearity output of every trainable layer.
pub fn forward(
    spec: &ModelSpec,
    weights: &LayerWeights,
    x: &Tensor,
) -> Result<(Tensor, ActivationCapture), NnError> {
    FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
    weights.check_against(spec)?;
    let w64 = Weights64::from_public(weights);
    forward_prepared(
        spec,
        &w64,
        &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )
}

fn forward_prepared(
    spec: &ModelSpec,
    w64: &Weights64,
    case: &[f64],
) -> Result<(Tensor, ActivationCapture), NnError> {
    let state = forward_f64(spec, w64, case, false)?;
    let probs = Tensor::new(
        vec![state.output.len()],
        state.output.iter().map(|&v| v as f32).collect(),
    )?;
    let capture = ActivationCapture {
        layers: state
            .captures
            .into_iter()
            .map(|(dims, vals)| (dims, vals.into_iter().map(|v| v as f32).collect()))
            .collect(),
    };
    Ok((probs, capture))
}

/// Forward pass over every case of a [n, …] tensor with a single weight
/// conversion. Counts one forward invocation per case.
pub fn forward_batch(
    spec: &ModelSpec,
    weights: &LayerWeights,
    inputs: &Tensor,
) -> Result<Vec<(Tensor, ActivationCapture)>, NnError> {
    weights.check_against(spec)?;
    let w64 = Weights64::from_public(weights);
    let n = inputs.num_cases();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        FORWARD_CALLS.fetch_add(1, Ordering::Relaxed);
        let case: Vec<f64> = inputs.case(i).iter().map(|&v| v as f64).collect();
        out.push(forward_prepared(spec, &w64, &case)?);
    }
    Ok(out)
}

fn backward_f64(
    spec: &ModelSpec,
    weights: &Weights64,
    state: &ForwardState,
    label: u32,
    grads: &mut Weights64,
) {
    // dL/dlogits for softmax + cross-entropy
    let probs = match state.tapes.last() {
        Some(Tape::Softmax { probs }) => probs.clone(),
        _ => unreachable!("validated models end in softmax"),
    };
    let mut grad: Vec<f64> = probs;
    grad[label as usize] -= 1.0;

    let mut trainable_idx = spec.num_trainable();
    // walk tapes in reverse, skipping the softmax we already consumed
    for (layer, tape) in spec
        .layers
        .iter()
        .zip(&state.tapes)
        .rev()
        .skip(1)
        .collect::<Vec<_>>()
        .into_iter()
    {
        match (layer, tape) {
            (LayerSpec::Dense { in_dim, out_dim }, Tape::Dense { input }) => {
                trainable_idx -= 1;
                let (kernel, _) = &weights.layers[trainable_idx];
                let (gk, gb) = &mut grads.layers[trainable_idx];
                let mut dx = vec![0.0; *in_dim];
                for i in 0..*out_dim {
                    gb[i] += grad[i];
                    for j in 0..*in_dim {
                        gk[j * out_dim + i] += input[j] * grad[i];
                        dx[j] += kernel[j * out_dim + i] * grad[i];
                    }
                }
                grad = dx;
            }
            (
                LayerSpec::Conv2D {
                    in_ch,
                    out_ch,
                    kh,
                    kw,
                    stride,
                    padding,
                },
                Tape::Conv {
                    input,
                    in_shape,
                    out_shape,
                },
            ) => {
                trainable_idx -= 1;
                let (kernel, _) = &weights.layers[trainable_idx];
                let (gk, gb) = &mut grads.layers[trainable_idx];
                let (h, w, _) = *in_shape;
                let (oh, ow, _) = *out_shape;
                let mut dx = vec![0.0; input.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for co in 0..*out_ch {
                            let g = grad[(oy * ow + ox) * out_ch + co];
                            if g == 0.0 {
                                continue;
                            }
                            gb[co] += g;
                            for ky in 0..*kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..*kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..*in_ch {
                                        let in_idx = (iy as usize * w + ix as usize) * in_ch + ci;
                                        let k_idx = ((ky * kw + kx) * in_ch + ci) * out_ch + co;
                                        gk[k_idx] += input[in_idx] * g;
                                        dx[in_idx] += kernel[k_idx] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                grad = dx;
            }
            (LayerSpec::MaxPool { .. }, Tape::MaxPool { argmax, in_len }) => {
                let mut dx = vec![0.0; *in_len];
                for (out_idx, &in_idx) in argmax.iter().enumerate() {
                    dx[in_idx] += grad[out_idx];
                }
                grad = dx;
            }
            (LayerSpec::Flatten, Tape::Flatten) => {}
            (LayerSpec::Relu, Tape::Relu { mask }) => {
                for (g, &m) in grad.iter_mut().zip(mask) {
                    if !m {
                        *g = 0.0;
                    }
                }
            }
            _ => unreachable!("tape out of sync with layers"),
        }
    }
}

fn zeros_like(w: &Weights64) -> Weights64 {
    Weights64 {
        layers: w
            .layers
            .iter()
            .map(|(k, b)| (vec![0.0; k.len()], vec![0.0; b.len()]))
            .collect(),
    }
}

/// Mean cross-entropy and its gradient over a batch, in f64.
/// Exposed so gradient checks can compare against finite differences.
pub fn loss_and_grads(
    spec: &ModelSpec,
    weights: &LayerWeights,
    inputs: &Tensor,
    labels: &[u32],
) -> Result<(f64, LayerWeights), NnError> {
    weights.check_against(spec)?;
    let w64 = Weights64::from_public(weights);
    let (loss, grads) = loss_and_grads_f64(spec, &w64, inputs, labels)?;
    Ok((loss, grads.to_public(spec)?))
}

fn loss_and_grads_f64(
    spec: &ModelSpec,
    w64: &Weights64,
    inputs: &Tensor,
    labels: &[u32],
) -> Result<(f64, Weights64), NnError> {
    let n = inputs.num_cases();
    let mut grads = zeros_like(w64);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate().take(n) {
        let case: Vec<f64> = inputs.case(i).iter().map(|&v| v as f64).collect();
        let state = forward_f64(spec, w64, &case, true)?;
        let p = state.output[label as usize].max(1e-300);
        loss -= p.ln();
        backward_f64(spec, w64, &state, label, &mut grads);
    }
    let scale = 1.0 / n as f64;
    loss *= scale;
    for (gk, gb) in &mut grads.layers {
        for v in gk.iter_mut() {
            *v *= scale;
        }
        for v in gb.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss, grads))
}

/// Uniform init in ±1/sqrt(fan_in) from a SplitMix64 stream; biases zero.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<LayerWeights, NnError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::new();
    for layer in spec.trainable_layers() {
        let (kshape, fan_in, out) = match layer {
            LayerSpec::Dense { in_dim, out_dim } => (vec![*in_dim, *out_dim], *in_dim, *out_dim),
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kh,
                kw,
                ..
            } => (vec![*kh, *kw, *in_ch, *out_ch], kh * kw * in_ch, *out_ch),
            _ => unreachable!(),
        };
        let scale = 1.0 / (fan_in as f64).sqrt();
        let klen: usize = kshape.iter().product();
        let kernel: Vec<f32> = (0..klen)
            .map(|_| rng.uniform_symmetric(scale) as f32)
            .collect();
        layers.push(TrainableWeights {
            kernel: Tensor::new(kshape, kernel)?,
            bias: Tensor::new(vec![out], vec![0.0; out])?,
        });
    }
    Ok(LayerWeights { layers })
}

/// Full-batch gradient descent with cross-entropy loss. Deterministic given
/// the seed. Returns the trained weights and the per-epoch loss history
/// (loss measured before each step).
pub fn train_sgd(
    spec: &ModelSpec,
    inputs: &Tensor,
    labels: &[u32],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(LayerWeights, Vec<f64>), NnError> {
    spec.validate()?;
    if inputs.num_cases() == 0 {
        return Err(NnError::InvalidSpec("empty training set".into()));
    }
    if lr <= 0.0 {
        return Err(NnError::InvalidSpec("learning rate must be > 0".into()));
    }
    if labels.len() != inputs.num_cases() {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {} cases",
            labels.len(),
            inputs.num_cases()
        )));
    }
    let init = init_weights(spec, seed)?;
    let mut w64 = Weights64::from_public(&init);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (loss, grads) = loss_and_grads_f64(spec, &w64, inputs, labels)?;
        if !loss.is_finite() {
            return Err(NnError::Divergence { epoch, loss });
        }
        history.push(loss);
        for ((k, b), (gk, gb)) in w64.layers.iter_mut().zip(&grads.layers) {
            for (v, g) in k.iter_mut().zip(gk) {
                *v -= lr * g;
            }
            for (v, g) in b.iter_mut().zip(gb) {
                *v -= lr * g;
            }
        }
    }
    Ok((w64.to_public(spec)?, history))
}

pub fn save_model(
    spec: &ModelSpec,
    weights: &LayerWeights,
    path: impl AsRef<Path>,
) -> Result<(), NnError> {
    spec.validate()?;
    weights.check_against(spec)?;
    let header = serde_json::to_vec(spec)
        .map_err(|e| NnError::MalformedModel(format!("spec serialization: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for tw in &weights.layers {
        for tensor in [&tw.kernel, &tw.bias] {
            let blob = tensor.to_bytes();
            w.write_all(&(blob.len() as u32).to_le_bytes())?;
            w.write_all(&blob)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelSpec, LayerWeights), NnError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(NnError::MalformedModel("file too short".into()));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(NnError::Tensor(TensorError::BadMagic {
            expected: String::from_utf8_lossy(MODEL_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        }));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(NnError::MalformedModel("truncated spec header".into()));
    }
    let spec: ModelSpec = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| NnError::MalformedModel(format!("spec header: {e}")))?;
    spec.validate()?;
    let mut pos = 12 + header_len;
    let mut blobs = Vec::new();
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(NnError::MalformedModel("truncated blob length".into()));
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + len > bytes.len() {
            return Err(NnError::MalformedModel("truncated weight blob".into()));
        }
        blobs.push(Tensor::from_bytes(&bytes[pos..pos + len])?);
        pos += len;
    }
    if blobs.len() != 2 * spec.num_trainable() {
        return Err(NnError::MalformedModel(format!(
            "expected {} weight blobs, found {}",
            2 * spec.num_trainable(),
            blobs.len()
        )));
    }
    let mut layers = Vec::new();
    let mut it = blobs.into_iter();
    while let (Some(kernel), Some(bias)) = (it.next(), it.next()) {
        layers.push(TrainableWeights { kernel, bias });
    }
    let weights = LayerWeights { layers };
    weights.check_against(&spec)?;
    Ok((spec, weights))
}
