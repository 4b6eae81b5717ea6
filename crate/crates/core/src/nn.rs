//! Minimal 1-D layer engine: forward and backward passes, parameter
//! initialization, FLOPs accounting and the `.dcn` model container.
//!
//! Tensors are `(channels, length)` row-major. Every layer accumulates in
//! `f64` and rounds once on output, so the same code serves the `f32`
//! deployment path and `f64` gradient checks. Gradients are always `f64`.
//!
//! FLOPs convention: one multiply-accumulate is 2 FLOPs, every activation,
//! comparison or averaging step is 1 FLOP per element, softmax is 3 FLOPs
//! per class.
//!
//! # `.dcn` layout
//!
//! All integers are little-endian `u32`, all weights little-endian `f32`.
//!
//! ```text
//! "DCN1" | in_channels | in_length | layer_count
//! layer_count x ( kind:u8 | kind-specific u32 parameters )
//! layer_count x ( weight f32[] | bias f32[] )
//! ```
//!
//! Kind bytes and their parameters: 1 Conv1d (in, out, kernel, stride,
//! padding), 2 ReLU, 3 MaxPool1d (window, stride), 4 Flatten, 5 Dense (in,
//! out), 6 Softmax, 7 GlobalAvgPool. Conv weights are `[out][in][kernel]`,
//! dense weights `[out][in]`.

use std::fmt::Debug;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io_util::{put_f32s, put_u32, ByteReader};

/// Floating-point element type of activations and parameters.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub length: usize,
}

impl Shape {
    pub const fn new(channels: usize, length: usize) -> Self {
        Self { channels, length }
    }

    pub fn elements(&self) -> usize {
        self.channels * self.length
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.channels, self.length)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor1 = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.channels == 0 || shape.length == 0 {
            return Err(Error::Shape(format!("tensor shape {shape} has a zero dimension")));
        }
        if data.len() != shape.elements() {
            return Err(Error::Shape(format!(
                "tensor shape {shape} needs {} values, got {}",
                shape.elements(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.elements()],
        }
    }

    /// A `(1, n)` tensor from `f32` samples.
    pub fn from_samples(samples: &[f32]) -> Self {
        Self {
            shape: Shape::new(1, samples.len()),
            data: samples.iter().map(|&s| T::from_f64(s as f64)).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One layer of a sequential model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool1d {
        window: usize,
        stride: usize,
    },
    Flatten,
    /// Accepts any input with `in_features` elements; output is `(1, out_features)`.
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Mean over the length axis; output is `(channels, 1)`.
    GlobalAvgPool,
    /// Normalizes over all elements of its input.
    Softmax,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "Conv1d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool1d { .. } => "MaxPool1d",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::Softmax => "Softmax",
        }
    }

    fn check_dims(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel_size > 0 && stride > 0,
            LayerSpec::MaxPool1d { window, stride } => window > 0 && stride > 0,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features > 0 && out_features > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("{self:?} has a zero dimension")))
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.check_dims()?;
        let mismatch = |what: String| Err(Error::Shape(format!("{}: {what}", self.name())));
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => {
                if input.channels != in_channels {
                    return mismatch(format!(
                        "expects {in_channels} input channels, got {}",
                        input.channels
                    ));
                }
                let padded = input.length + 2 * padding;
                if padded < kernel_size {
                    return mismatch(format!("kernel {kernel_size} longer than padded input {padded}"));
                }
                Ok(Shape::new(out_channels, (padded - kernel_size) / stride + 1))
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input),
            LayerSpec::MaxPool1d { window, stride } => {
                if input.length < window {
                    return mismatch(format!("window {window} longer than input {}", input.length));
                }
                Ok(Shape::new(input.channels, (input.length - window) / stride + 1))
            }
            LayerSpec::Flatten => Ok(Shape::new(1, input.elements())),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input.elements() != in_features {
                    return mismatch(format!(
                        "expects {in_features} features, got {}",
                        input.elements()
                    ));
                }
                Ok(Shape::new(1, out_features))
            }
            LayerSpec::GlobalAvgPool => Ok(Shape::new(input.channels, 1)),
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => in_channels * out_channels * kernel_size,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features * out_features,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv1d { out_channels, .. } => out_channels,
            LayerSpec::Dense { out_features, .. } => out_features,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.bias_len()
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => (in_channels * kernel_size, out_channels * kernel_size),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => (in_features, out_features),
            _ => (0, 0),
        }
    }

    fn kind_byte(&self) -> u8 {
        match self {
            LayerSpec::Conv1d { .. } => 1,
            LayerSpec::Relu => 2,
            LayerSpec::MaxPool1d { .. } => 3,
            LayerSpec::Flatten => 4,
            LayerSpec::Dense { .. } => 5,
            LayerSpec::Softmax => 6,
            LayerSpec::GlobalAvgPool => 7,
        }
    }

    fn header_ints(&self) -> Vec<u32> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel_size,
                stride,
                padding,
            } => vec![in_channels, out_channels, kernel_size, stride, padding],
            LayerSpec::MaxPool1d { window, stride } => vec![window, stride],
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![in_features, out_features],
            _ => vec![],
        }
        .into_iter()
        .map(|v| v as u32)
        .collect()
    }

    /// Bytes this layer occupies in a `.dcn` file (header entry plus payload).
    pub fn encoded_len(&self) -> usize {
        1 + 4 * self.header_ints().len() + 4 * self.param_count()
    }
}

/// FLOPs of one layer applied to `input`.
pub fn flops_of_layer(layer: &LayerSpec, input: Shape) -> Result<u64> {
    let out = layer.output_shape(input)?;
    let f = match *layer {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            ..
        } => 2 * out_channels * out.length * in_channels * kernel_size,
        LayerSpec::Dense {
            in_features,
            out_features,
        } => 2 * in_features * out_features,
        LayerSpec::Relu | LayerSpec::MaxPool1d { .. } => out.elements(),
        LayerSpec::GlobalAvgPool => input.elements(),
        LayerSpec::Flatten => 0,
        LayerSpec::Softmax => 3 * input.elements(),
    };
    Ok(f as u64)
}

/// A shape-checked sequential model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
    input_shape: Shape,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Shape) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Format {
                offset: 0,
                reason: "a model must contain at least one layer".into(),
            });
        }
        if input_shape.channels == 0 || input_shape.length == 0 {
            return Err(Error::Shape(format!("input shape {input_shape} has a zero dimension")));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape);
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes[i])
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(Self {
            layers,
            input_shape,
            shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("non-empty")
    }

    /// Input shape of layer `i`; `i == len()` gives the model output.
    pub fn shape_before(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().elements()
    }

    /// `L`, the number of convolutional layers.
    pub fn num_conv_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv1d { .. }))
            .count()
    }

    /// Layer index where convolutional block `k + 1` starts, i.e. the cut
    /// point for an exit after block `k`. Valid for `1 <= k <= L - 1`.
    pub fn block_boundary(&self, k: usize) -> Option<usize> {
        if k == 0 {
            return None;
        }
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv1d { .. }))
            .nth(k)
            .map(|(i, _)| i)
    }

    pub fn flops_per_layer(&self) -> Vec<u64> {
        self.layers
            .iter()
            .zip(&self.shapes)
            .map(|(l, &s)| flops_of_layer(l, s).expect("validated at construction"))
            .collect()
    }

    pub fn total_flops(&self) -> u64 {
        self.flops_per_layer().iter().sum()
    }

    pub fn flops_in(&self, range: Range<usize>) -> u64 {
        self.flops_per_layer()[range].iter().sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// The sub-model made of `range`, with its input shape taken from this model.
    pub fn slice(&self, range: Range<usize>) -> Result<ModelSpec> {
        if range.start >= range.end || range.end > self.layers.len() {
            return invalid(format!("layer range {range:?} out of bounds for {} layers", self.len()));
        }
        ModelSpec::new(self.layers[range.clone()].to_vec(), self.shapes[range.start])
    }
}

/// Default conv widths; six blocks of Conv1d(k=5, s=1, p=2) + ReLU + MaxPool(2, 2).
pub const DEFAULT_CHANNELS: [usize; 6] = [8, 16, 16, 32, 32, 64];
pub const DEFAULT_KERNEL: usize = 5;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_INPUT_LEN: usize = 260;
pub const DEFAULT_CLASSES: usize = 5;

/// Conv blocks with the given widths, then Flatten, Dense(hidden), ReLU,
/// Dense(classes), Softmax.
pub fn backbone(
    channels: &[usize],
    kernel_size: usize,
    hidden: usize,
    input_len: usize,
    num_classes: usize,
) -> Result<ModelSpec> {
    if channels.is_empty() {
        return invalid("backbone needs at least one conv block");
    }
    if kernel_size % 2 == 0 {
        return invalid("kernel size must be odd for same-length padding");
    }
    let mut layers = Vec::new();
    let mut in_ch = 1;
    let mut len = input_len;
    for &out_ch in channels {
        layers.push(LayerSpec::conv(in_ch, out_ch, kernel_size, 1, kernel_size / 2));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool1d { window: 2, stride: 2 });
        in_ch = out_ch;
        len /= 2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense(in_ch * len, hidden));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::dense(hidden, num_classes));
    layers.push(LayerSpec::Softmax);
    ModelSpec::new(layers, Shape::new(1, input_len))
}

pub fn default_backbone() -> ModelSpec {
    backbone(
        &DEFAULT_CHANNELS,
        DEFAULT_KERNEL,
        DEFAULT_HIDDEN,
        DEFAULT_INPUT_LEN,
        DEFAULT_CLASSES,
    )
    .expect("default backbone is valid")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-layer weights and biases, indexed like the owning model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self::zeros_for(spec.layers())
    }

    pub fn zeros_for(layers: &[LayerSpec]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerParams {
                    weight: vec![T::zero(); l.weight_len()],
                    bias: vec![T::zero(); l.bias_len()],
                })
                .collect(),
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        Self::init_for(spec.layers(), seed)
    }

    pub fn init_for(layers: &[LayerSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::zeros_for(layers);
        for (l, p) in layers.iter().zip(&mut store.layers) {
            let (fan_in, fan_out) = l.fans();
            if fan_in + fan_out == 0 {
                continue;
            }
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut p.weight {
                *w = T::from_f64(rng.random_range(-limit..=limit));
            }
        }
        store
    }

    pub fn check_matches(&self, layers: &[LayerSpec]) -> Result<()> {
        if self.layers.len() != layers.len() {
            return Err(Error::Shape(format!(
                "parameter store has {} layers, model has {}",
                self.layers.len(),
                layers.len()
            )));
        }
        for (i, (l, p)) in layers.iter().zip(&self.layers).enumerate() {
            if p.weight.len() != l.weight_len() || p.bias.len() != l.bias_len() {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) expects {}+{} parameters, got {}+{}",
                    l.name(),
                    l.weight_len(),
                    l.bias_len(),
                    p.weight.len(),
                    p.bias.len()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    bias: p.bias.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            layers: self.layers[range].to_vec(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// `p -= scale * g`, computed in `f64`.
    pub fn apply_update(&mut self, grads: &GradStore, scale: f64) {
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in p.weight.iter_mut().zip(&g.weight) {
                *w = T::from_f64(w.as_f64() - scale * gw);
            }
            for (b, gb) in p.bias.iter_mut().zip(&g.bias) {
                *b = T::from_f64(b.as_f64() - scale * gb);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|p| p.weight.iter().chain(&p.bias).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub layers: Vec<LayerGrad>,
}

impl GradStore {
    pub fn zeros_for(layers: &[LayerSpec]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight_len()],
                    bias: vec![0.0; l.bias_len()],
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &GradStore) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum()
    }
}

/// Apply a single layer.
pub fn layer_forward<T: Scalar>(layer: &LayerSpec, p: &LayerParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = layer.output_shape(x.shape)?;
    if p.weight.len() != layer.weight_len() || p.bias.len() != layer.bias_len() {
        return Err(Error::Shape(format!("{} parameters have the wrong size", layer.name())));
    }
    let xd = &x.data;
    let data: Vec<T> = match *layer {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size: k,
            stride,
            padding,
        } => {
            let len_in = x.shape.length;
            let len_out = out_shape.length;
            let mut out = Vec::with_capacity(out_channels * len_out);
            for oc in 0..out_channels {
                let wbase = oc * in_channels * k;
                for o in 0..len_out {
                    let start = (o * stride) as isize - padding as isize;
                    let k_lo = (-start).max(0) as usize;
                    let k_hi = ((len_in as isize - start).min(k as isize)).max(0) as usize;
                    let mut acc = p.bias[oc].as_f64();
                    for c in 0..in_channels {
                        let w = &p.weight[wbase + c * k..wbase + (c + 1) * k];
                        let row = &xd[c * len_in..(c + 1) * len_in];
                        for kk in k_lo..k_hi {
                            acc += w[kk].as_f64() * row[(start + kk as isize) as usize].as_f64();
                        }
                    }
                    out.push(T::from_f64(acc));
                }
            }
            out
        }
        LayerSpec::Relu => xd.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        LayerSpec::MaxPool1d { window, stride } => {
            let len_in = x.shape.length;
            let mut out = Vec::with_capacity(out_shape.elements());
            for c in 0..x.shape.channels {
                let row = &xd[c * len_in..(c + 1) * len_in];
                for o in 0..out_shape.length {
                    let win = &row[o * stride..o * stride + window];
                    out.push(win.iter().skip(1).fold(win[0], |m, &v| if v > m { v } else { m }));
                }
            }
            out
        }
        LayerSpec::Flatten => xd.clone(),
        LayerSpec::Dense {
            in_features,
            out_features,
        } => (0..out_features)
            .map(|j| {
                let w = &p.weight[j * in_features..(j + 1) * in_features];
                let acc = w
                    .iter()
                    .zip(xd)
                    .fold(p.bias[j].as_f64(), |a, (&wi, &xi)| a + wi.as_f64() * xi.as_f64());
                T::from_f64(acc)
            })
            .collect(),
        LayerSpec::GlobalAvgPool => {
            let len = x.shape.length;
            (0..x.shape.channels)
                .map(|c| {
                    let s: f64 = xd[c * len..(c + 1) * len].iter().map(|v| v.as_f64()).sum();
                    T::from_f64(s / len as f64)
                })
                .collect()
        }
        LayerSpec::Softmax => softmax(xd),
    };
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| T::from_f64(v / s)).collect()
}

/// Run `layers` in order on `input`.
pub fn run_layers<T: Scalar>(layers: &[LayerSpec], params: &[LayerParams<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    if layers.len() != params.len() {
        return Err(Error::Shape("layer and parameter counts differ".into()));
    }
    let mut cur = input.clone();
    for (l, p) in layers.iter().zip(params) {
        cur = layer_forward(l, p, &cur)?;
    }
    Ok(cur)
}

/// Like [`run_layers`] but keeps every activation; `out[0]` is the input.
pub fn run_layers_trace<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if layers.len() != params.len() {
        return Err(Error::Shape("layer and parameter counts differ".into()));
    }
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input);
    for (l, p) in layers.iter().zip(params) {
        let next = layer_forward(l, p, acts.last().expect("non-empty"))?;
        acts.push(next);
    }
    Ok(acts)
}

fn check_input<T: Scalar>(model: &ModelSpec, params: &ParamStore<T>, input: &Tensor<T>) -> Result<()> {
    if input.shape != model.input_shape {
        return Err(Error::Shape(format!(
            "model expects input {}, got {}",
            model.input_shape, input.shape
        )));
    }
    params.check_matches(&model.layers)
}

/// Full forward pass, or the activation of layer `upto` when given.
pub fn forward<T: Scalar>(
    model: &ModelSpec,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    upto: Option<usize>,
) -> Result<Tensor<T>> {
    check_input(model, params, input)?;
    let end = match upto {
        Some(i) if i >= model.len() => {
            return invalid(format!("layer {i} out of range for {} layers", model.len()))
        }
        Some(i) => i + 1,
        None => model.len(),
    };
    run_layers(&model.layers[..end], &params.layers[..end], input)
}

/// Forward pass keeping all activations; `out[0]` is the input.
pub fn forward_trace<T: Scalar>(model: &ModelSpec, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    check_input(model, params, input)?;
    run_layers_trace(&model.layers, &params.layers, input.clone())
}

/// Backward pass through one layer. Accumulates parameter gradients into
/// `g` and returns the gradient with respect to `x`.
pub fn layer_backward<T: Scalar>(
    layer: &LayerSpec,
    p: &LayerParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    gy: &[f64],
    g: &mut LayerGrad,
) -> Vec<f64> {
    let xd = &x.data;
    let mut gx = vec![0.0f64; xd.len()];
    match *layer {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            kernel_size: k,
            stride,
            padding,
        } => {
            let len_in = x.shape.length;
            let len_out = y.shape.length;
            for oc in 0..out_channels {
                let wbase = oc * in_channels * k;
                for o in 0..len_out {
                    let go = gy[oc * len_out + o];
                    if go == 0.0 {
                        continue;
                    }
                    g.bias[oc] += go;
                    let start = (o * stride) as isize - padding as isize;
                    let k_lo = (-start).max(0) as usize;
                    let k_hi = ((len_in as isize - start).min(k as isize)).max(0) as usize;
                    for c in 0..in_channels {
                        for kk in k_lo..k_hi {
                            let xi = c * len_in + (start + kk as isize) as usize;
                            let wi = wbase + c * k + kk;
                            g.weight[wi] += go * xd[xi].as_f64();
                            gx[xi] += go * p.weight[wi].as_f64();
                        }
                    }
                }
            }
        }
        LayerSpec::Relu => {
            for ((gxi, &xi), &gyi) in gx.iter_mut().zip(xd).zip(gy) {
                if xi > T::zero() {
                    *gxi = gyi;
                }
            }
        }
        LayerSpec::MaxPool1d { window, stride } => {
            let len_in = x.shape.length;
            let len_out = y.shape.length;
            for c in 0..x.shape.channels {
                let row = &xd[c * len_in..(c + 1) * len_in];
                for o in 0..len_out {
                    let base = o * stride;
                    let mut arg = base;
                    for i in base + 1..base + window {
                        if row[i] > row[arg] {
                            arg = i;
                        }
                    }
                    gx[c * len_in + arg] += gy[c * len_out + o];
                }
            }
        }
        LayerSpec::Flatten => gx.copy_from_slice(gy),
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            for j in 0..out_features {
                let gj = gy[j];
                g.bias[j] += gj;
                if gj == 0.0 {
                    continue;
                }
                let row = j * in_features;
                for i in 0..in_features {
                    g.weight[row + i] += gj * xd[i].as_f64();
                    gx[i] += gj * p.weight[row + i].as_f64();
                }
            }
        }
        LayerSpec::GlobalAvgPool => {
            let len = x.shape.length;
            for c in 0..x.shape.channels {
                let v = gy[c] / len as f64;
                gx[c * len..(c + 1) * len].iter_mut().for_each(|e| *e = v);
            }
        }
        LayerSpec::Softmax => {
            let dot: f64 = y.data.iter().zip(gy).map(|(p, g)| p.as_f64() * g).sum();
            for ((gxi, pi), gyi) in gx.iter_mut().zip(&y.data).zip(gy) {
                *gxi = pi.as_f64() * (gyi - dot);
            }
        }
    }
    gx
}

/// Backpropagate `grad_out` (gradient at `acts.last()`) through `layers`,
/// accumulating into `grads`. Returns the gradient at `acts[0]`.
pub fn backprop<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    acts: &[Tensor<T>],
    grad_out: Vec<f64>,
    grads: &mut [LayerGrad],
) -> Vec<f64> {
    debug_assert_eq!(acts.len(), layers.len() + 1);
    let mut g = grad_out;
    for i in (0..layers.len()).rev() {
        g = layer_backward(&layers[i], &params[i], &acts[i], &acts[i + 1], &g, &mut grads[i]);
    }
    g
}

/// Cross-entropy of a probability vector against `target`.
pub fn cross_entropy<T: Scalar>(probs: &[T], target: usize) -> f64 {
    -probs[target].as_f64().max(f64::MIN_POSITIVE).ln()
}

/// `weight * (p - onehot(target))`: the loss gradient at the softmax input.
pub fn softmax_ce_delta<T: Scalar>(probs: &[T], target: usize, weight: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| weight * (p.as_f64() - if i == target { 1.0 } else { 0.0 }))
        .collect()
}

/// Gradients of the cross-entropy loss of a softmax-terminated model.
/// Returns the gradient store and the loss.
pub fn backward<T: Scalar>(
    model: &ModelSpec,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    target_class: usize,
) -> Result<(GradStore, f64)> {
    if !matches!(model.layers.last(), Some(LayerSpec::Softmax)) {
        return invalid("backward needs a model ending in Softmax");
    }
    if target_class >= model.num_classes() {
        return invalid(format!(
            "target class {target_class} outside 0..{}",
            model.num_classes()
        ));
    }
    let acts = forward_trace(model, params, input)?;
    let n = model.len();
    let probs = acts[n].data();
    let loss = cross_entropy(probs, target_class);
    let delta = softmax_ce_delta(probs, target_class, 1.0);
    let mut grads = GradStore::zeros_for(&model.layers);
    backprop(
        &model.layers[..n - 1],
        &params.layers[..n - 1],
        &acts[..n],
        delta,
        &mut grads.layers[..n - 1],
    );
    Ok((grads, loss))
}

const DCN_MAGIC: &[u8; 4] = b"DCN1";

/// Layers and parameters as stored in a `.dcn` file, before shape checking.
/// Stage files of a partition hold several sub-models back to back, so they
/// only decode to this form.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore<f32>,
}

impl RawModel {
    pub fn into_model(self) -> Result<(ModelSpec, ParamStore<f32>)> {
        let spec = ModelSpec::new(self.layers, self.input_shape)?;
        self.params.check_matches(spec.layers())?;
        Ok((spec, self.params))
    }
}

pub fn encode_layers(input_shape: Shape, layers: &[LayerSpec], params: &[LayerParams<f32>]) -> Vec<u8> {
    let size = 16 + layers.iter().map(LayerSpec::encoded_len).sum::<usize>();
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(DCN_MAGIC);
    put_u32(&mut out, input_shape.channels as u32);
    put_u32(&mut out, input_shape.length as u32);
    put_u32(&mut out, layers.len() as u32);
    for l in layers {
        out.push(l.kind_byte());
        for v in l.header_ints() {
            put_u32(&mut out, v);
        }
    }
    for p in params {
        put_f32s(&mut out, &p.weight);
        put_f32s(&mut out, &p.bias);
    }
    out
}

/// Size in bytes of the `.dcn` encoding of `layers`.
pub fn encoded_size(layers: &[LayerSpec]) -> usize {
    16 + layers.iter().map(LayerSpec::encoded_len).sum::<usize>()
}

pub fn decode_layers(bytes: &[u8]) -> Result<RawModel> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != DCN_MAGIC {
        return Err(r.format_err(0, "bad magic, not a .dcn file"));
    }
    let channels = r.u32("input channels")? as usize;
    let length = r.u32("input length")? as usize;
    if channels == 0 || length == 0 {
        return Err(r.format_err(4, "input shape has a zero dimension"));
    }
    let count_at = r.position();
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(r.format_err(count_at, "a model must contain at least one layer"));
    }
    let mut layers = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = r.position();
        let kind = r.u8("layer kind")?;
        let mut ints = |n: usize| -> Result<Vec<usize>> {
            (0..n).map(|_| r.u32("layer parameter").map(|v| v as usize)).collect()
        };
        let layer = match kind {
            1 => {
                let v = ints(5)?;
                LayerSpec::conv(v[0], v[1], v[2], v[3], v[4])
            }
            2 => LayerSpec::Relu,
            3 => {
                let v = ints(2)?;
                LayerSpec::MaxPool1d {
                    window: v[0],
                    stride: v[1],
                }
            }
            4 => LayerSpec::Flatten,
            5 => {
                let v = ints(2)?;
                LayerSpec::dense(v[0], v[1])
            }
            6 => LayerSpec::Softmax,
            7 => LayerSpec::GlobalAvgPool,
            other => return Err(r.format_err(at, format!("unknown layer kind {other}"))),
        };
        layer
            .check_dims()
            .map_err(|e| r.format_err(at, e.to_string()))?;
        layers.push(layer);
    }
    let mut params = Vec::with_capacity(count);
    for l in &layers {
        let weight = r.f32_vec(l.weight_len(), "weights")?;
        let bias = r.f32_vec(l.bias_len(), "biases")?;
        params.push(LayerParams { weight, bias });
    }
    if r.remaining() != 0 {
        return Err(r.format_err(r.position(), "trailing bytes after payload"));
    }
    Ok(RawModel {
        input_shape: Shape::new(channels, length),
        layers,
        params: ParamStore { layers: params },
    })
}

pub fn serialize(model: &ModelSpec, params: &ParamStore<f32>) -> Vec<u8> {
    encode_layers(model.input_shape, &model.layers, &params.layers)
}

pub fn deserialize(bytes: &[u8]) -> Result<(ModelSpec, ParamStore<f32>)> {
    decode_layers(bytes)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(seed: u64) -> (ModelSpec, ParamStore<f64>) {
        let spec = ModelSpec::new(
            vec![
                LayerSpec::conv(1, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { window: 2, stride: 2 },
                LayerSpec::conv(3, 2, 3, 2, 0),
                LayerSpec::Flatten,
                LayerSpec::dense(6, 5),
                LayerSpec::Softmax,
            ],
            Shape::new(1, 16),
        )
        .unwrap();
        let mut p = ParamStore::<f64>::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        (spec, p)
    }

    fn input(seed: u64, len: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(Shape::new(1, len), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct per-element convolution with explicit zero padding.
    fn conv_oracle(x: &[f64], len: usize, ic: usize, oc: usize, k: usize, s: usize, pad: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut padded = vec![vec![0.0; len + 2 * pad]; ic];
        for c in 0..ic {
            for i in 0..len {
                padded[c][i + pad] = x[c * len + i];
            }
        }
        let out_len = (len + 2 * pad - k) / s + 1;
        let mut y = vec![0.0; oc * out_len];
        for o in 0..oc {
            for t in 0..out_len {
                let mut acc = b[o];
                for c in 0..ic {
                    for kk in 0..k {
                        acc += w[o * ic * k + c * k + kk] * padded[c][t * s + kk];
                    }
                }
                y[o * out_len + t] = acc;
            }
        }
        y
    }

    #[test]
    fn zero_conv_gives_zeros() {
        let spec = ModelSpec::new(vec![LayerSpec::conv(1, 4, 5, 1, 2)], Shape::new(1, 20)).unwrap();
        let p = ParamStore::<f32>::zeros(&spec);
        let y = forward(&spec, &p, &Tensor::from_samples(&[0.7; 20]), None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let spec = ModelSpec::new(vec![LayerSpec::conv(1, 1, 1, 1, 0)], Shape::new(1, 8)).unwrap();
        let mut p = ParamStore::<f32>::zeros(&spec);
        p.layers[0].weight[0] = 1.0;
        let x = Tensor::from_samples(&[0.5, -1.0, 2.0, 3.25, 0.0, -7.5, 1e-3, 4.0]);
        assert_eq!(forward(&spec, &p, &x, None).unwrap(), x);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for seed in 0..5 {
            let (spec, p) = micro(seed);
            let x = input(seed + 100, 16);
            // conv(1->3, k3, p1) -> relu -> maxpool(2) -> conv(3->2, k3, s2) -> dense -> softmax
            let c1 = conv_oracle(x.data(), 16, 1, 3, 3, 1, 1, &p.layers[0].weight, &p.layers[0].bias);
            let r: Vec<f64> = c1.iter().map(|v| v.max(0.0)).collect();
            let mut mp = vec![0.0; 3 * 8];
            for c in 0..3 {
                for t in 0..8 {
                    mp[c * 8 + t] = r[c * 16 + 2 * t].max(r[c * 16 + 2 * t + 1]);
                }
            }
            let c2 = conv_oracle(&mp, 8, 3, 2, 3, 2, 0, &p.layers[3].weight, &p.layers[3].bias);
            let mut logits = vec![0.0; 5];
            for j in 0..5 {
                logits[j] = p.layers[5].bias[j];
                for i in 0..6 {
                    logits[j] += p.layers[5].weight[j * 6 + i] * c2[i];
                }
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let y = forward(&spec, &p, &x, None).unwrap();
            for (j, got) in y.data().iter().enumerate() {
                let want = (logits[j] - m).exp() / z;
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "seed {seed} class {j}");
            }
        }
    }

    #[test]
    fn upto_returns_intermediate_activation() {
        let (spec, p) = micro(1);
        let x = input(2, 16);
        let trace = forward_trace(&spec, &p, &x).unwrap();
        let mid = forward(&spec, &p, &x, Some(2)).unwrap();
        assert_eq!(mid, trace[3]);
        assert_eq!(mid.shape(), Shape::new(3, 8));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (spec, p) = micro(1);
        assert!(matches!(forward(&spec, &p, &input(1, 15), None), Err(Error::Shape(_))));
        assert!(matches!(
            ModelSpec::new(vec![LayerSpec::dense(7, 3)], Shape::new(1, 8)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn flops_convention() {
        assert_eq!(flops_of_layer(&LayerSpec::dense(10, 5), Shape::new(1, 10)).unwrap(), 100);
        assert_eq!(flops_of_layer(&LayerSpec::Relu, Shape::new(8, 260)).unwrap(), 2080);
        assert_eq!(flops_of_layer(&LayerSpec::Softmax, Shape::new(1, 5)).unwrap(), 15);
        // Count multiply-adds of the first default conv by enumerating every
        // (out channel, position, in channel, tap) that the layer evaluates,
        // padded taps included.
        let (oc, len, ic, k) = (8, 260, 1, 5);
        let mut macs = 0u64;
        for _o in 0..oc {
            for _t in 0..len {
                for _c in 0..ic {
                    for _kk in 0..k {
                        macs += 1;
                    }
                }
            }
        }
        let conv = LayerSpec::conv(1, 8, 5, 1, 2);
        assert_eq!(flops_of_layer(&conv, Shape::new(1, 260)).unwrap(), 2 * macs);
        assert_eq!(2 * macs, 20800);
        assert!(flops_of_layer(&conv, Shape::new(2, 260)).is_err());
    }

    #[test]
    fn default_backbone_layout() {
        let m = default_backbone();
        assert_eq!(m.num_conv_layers(), 6);
        assert_eq!(m.input_shape(), Shape::new(1, 260));
        assert_eq!(m.num_classes(), 5);
        assert_eq!(m.block_boundary(2), Some(6));
        assert_eq!(m.block_boundary(5), Some(15));
        assert_eq!(m.block_boundary(6), None);
        assert_eq!(m.shape_before(6), Shape::new(16, 65));
    }

    #[test]
    fn softmax_is_a_distribution() {
        let m = default_backbone();
        let p = ParamStore::<f32>::init(&m, 3);
        let x = Tensor::from_samples(&crate::beatset::class_template(crate::beatset::AamiClass::Veb)
            .iter()
            .map(|&v| v as f32)
            .collect::<Vec<_>>());
        let y = forward(&m, &p, &x, None).unwrap();
        let s: f64 = y.data().iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(forward(&m, &p, &x, None).unwrap(), y);
    }

    #[test]
    fn zero_learning_signal_gives_zero_bias_gradient() {
        let spec = ModelSpec::new(vec![LayerSpec::dense(3, 5), LayerSpec::Softmax], Shape::new(1, 3)).unwrap();
        let mut p = ParamStore::<f64>::zeros(&spec);
        p.layers[0].bias = vec![-1e3, -1e3, 1e3, -1e3, -1e3];
        let x = Tensor::new(Shape::new(1, 3), vec![0.1, 0.2, 0.3]).unwrap();
        let (g, loss) = backward(&spec, &p, &x, 2).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.layers[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_gradient_is_outer_product() {
        let spec = ModelSpec::new(vec![LayerSpec::dense(4, 5), LayerSpec::Softmax], Shape::new(1, 4)).unwrap();
        let p = ParamStore::<f64>::init(&spec, 9);
        let x = input(4, 4);
        let target = 3;
        let (g, _) = backward(&spec, &p, &x, target).unwrap();
        let probs = forward(&spec, &p, &x, None).unwrap();
        for j in 0..5 {
            let delta = probs.data()[j] - if j == target { 1.0 } else { 0.0 };
            assert!((g.layers[0].bias[j] - delta).abs() < 1e-15);
            for i in 0..4 {
                let want = delta * x.data()[i];
                assert!((g.layers[0].weight[j * 4 + i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_rejects_bad_target() {
        let (spec, p) = micro(0);
        assert!(matches!(backward(&spec, &p, &input(0, 16), 5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let eps = 1e-4;
        for seed in 0..4 {
            let (spec, p) = micro(seed);
            let x = input(seed + 50, 16);
            let target = (seed % 5) as usize;
            let (g, _) = backward(&spec, &p, &x, target).unwrap();
            let loss = |q: &ParamStore<f64>| {
                cross_entropy(forward(&spec, q, &x, None).unwrap().data(), target)
            };
            for li in 0..spec.len() {
                for (wi, is_bias) in (0..p.layers[li].weight.len())
                    .map(|i| (i, false))
                    .chain((0..p.layers[li].bias.len()).map(|i| (i, true)))
                {
                    let bump = |d: f64| {
                        let mut q = p.clone();
                        let v = if is_bias { &mut q.layers[li].bias[wi] } else { &mut q.layers[li].weight[wi] };
                        *v += d;
                        loss(&q)
                    };
                    let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let an = if is_bias { g.layers[li].bias[wi] } else { g.layers[li].weight[wi] };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} layer {li} param {wi}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn serialization_roundtrip_is_bitwise() {
        let m = default_backbone();
        let p = ParamStore::<f32>::init(&m, 5);
        let bytes = serialize(&m, &p);
        assert_eq!(bytes.len(), encoded_size(m.layers()));
        let (m2, p2) = deserialize(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(serialize(&m2, &p2), bytes);
    }

    #[test]
    fn empty_model_is_a_format_error() {
        assert!(matches!(ModelSpec::new(vec![], Shape::new(1, 260)), Err(Error::Format { .. })));
        let mut bytes = b"DCN1".to_vec();
        for v in [1u32, 260, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(deserialize(&bytes), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let (spec, p) = micro(2);
        let bytes = serialize(&spec, &p.cast());
        let cut = bytes.len() - 5;
        match deserialize(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut && offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[16] = 99;
        assert!(matches!(deserialize(&bad), Err(Error::Format { offset: 16, .. })));
    }
}
