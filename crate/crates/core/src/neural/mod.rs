//! A small CPU neural-network engine sized for Q-value regression:
//! same-padded 2D convolutions and dense layers with ReLU or linear
//! activations, exact backpropagation of a squared TD error on one output,
//! and Adam.
//!
//! Tensors are flat `f64` buffers in row-major order:
//! activations `[channel][row][col]`, conv weights `[out][in][kh][kw]`,
//! dense weights `[out][in]`.

mod adam;
pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("action index {index} out of range for {outputs} outputs")]
    ActionIndex { index: usize, outputs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Same,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        activation: Activation,
        #[serde(default)]
        padding: Padding,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: [usize; 2], stride: [usize; 2]) -> Self {
        LayerSpec::Conv2d { filters, kernel, stride, activation: Activation::Relu, padding: Padding::Same }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::Dense { units, activation }
    }

    fn activation(&self) -> Activation {
        match self {
            LayerSpec::Conv2d { activation, .. } | LayerSpec::Dense { activation, .. } => *activation,
        }
    }
}

/// The three-conv stack followed by a linear output layer of `n_outputs`.
pub fn conv_q_layers(n_outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(32, [8, 8], [4, 4]),
        LayerSpec::conv(64, [4, 4], [2, 2]),
        LayerSpec::conv(64, [3, 3], [1, 1]),
        LayerSpec::dense(n_outputs, Activation::Linear),
    ]
}

/// Dense ReLU hidden layers followed by a linear output layer.
pub fn mlp_q_layers(hidden: &[usize], n_outputs: usize) -> Vec<LayerSpec> {
    hidden
        .iter()
        .map(|&h| LayerSpec::dense(h, Activation::Relu))
        .chain(std::iter::once(LayerSpec::dense(n_outputs, Activation::Linear)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv(ConvGeom),
    Dense { inputs: usize, outputs: usize },
}

impl Op {
    fn n_outputs(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_c * g.out_h * g.out_w,
            Op::Dense { outputs, .. } => *outputs,
        }
    }

    fn n_weights(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_c * g.in_c * g.kh * g.kw,
            Op::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    fn n_bias(&self) -> usize {
        match self {
            Op::Conv(g) => g.out_c,
            Op::Dense { outputs, .. } => *outputs,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            Op::Conv(g) => (g.in_c * g.kh * g.kw, g.out_c * g.kh * g.kw),
            Op::Dense { inputs, outputs } => (*inputs, *outputs),
        }
    }
}

/// `(out, pad_before)` for TensorFlow-style "same" padding.
fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    op: Op,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Q-network parameters `θ` plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    input_shape: [usize; 3],
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

/// Parameter-shaped buffers, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, x)| *a += x);
            b.iter_mut().zip(ob).for_each(|(a, x)| *a += x);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| *g == 0.0)
    }
}

/// Activations recorded by a forward pass: `inputs[l]` feeds layer `l`,
/// `pre[l]` is its pre-activation.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl QNetwork {
    /// Resolve layer shapes for `input_shape = [channels, rows, cols]`.
    /// Conv kernels are clamped to the incoming spatial size per axis.
    pub fn new<R: Rng + ?Sized>(input_shape: [usize; 3], specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(input_shape, specs)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.op.fans();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    /// Same architecture as [`Self::new`] with every parameter zero.
    pub fn zeros(input_shape: [usize; 3], specs: Vec<LayerSpec>) -> Result<Self, NeuralError> {
        if input_shape.contains(&0) {
            return Err(NeuralError::InvalidLayer(format!("input shape {input_shape:?} has a zero dimension")));
        }
        match specs.last() {
            Some(LayerSpec::Dense { activation: Activation::Linear, .. }) => {}
            _ => return Err(NeuralError::InvalidLayer("output layer must be dense with linear activation".into())),
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = Some(input_shape);
        let mut flat = input_shape.iter().product::<usize>();
        for (i, spec) in specs.iter().enumerate() {
            let op = match spec {
                LayerSpec::Conv2d { filters, kernel, stride, .. } => {
                    let [c, h, w] = shape.ok_or_else(|| {
                        NeuralError::InvalidLayer(format!("layer {i}: convolution after a dense layer"))
                    })?;
                    if *filters == 0 || kernel.contains(&0) || stride.contains(&0) {
                        return Err(NeuralError::InvalidLayer(format!("layer {i}: zero-sized conv parameter")));
                    }
                    let (kh, kw) = (kernel[0].min(h), kernel[1].min(w));
                    let (out_h, pad_top) = same_padding(h, kh, stride[0]);
                    let (out_w, pad_left) = same_padding(w, kw, stride[1]);
                    let g = ConvGeom {
                        in_c: c,
                        in_h: h,
                        in_w: w,
                        out_c: *filters,
                        out_h,
                        out_w,
                        kh,
                        kw,
                        sh: stride[0],
                        sw: stride[1],
                        pad_top,
                        pad_left,
                    };
                    shape = Some([*filters, out_h, out_w]);
                    Op::Conv(g)
                }
                LayerSpec::Dense { units, .. } => {
                    if *units == 0 {
                        return Err(NeuralError::InvalidLayer(format!("layer {i}: dense layer with zero units")));
                    }
                    shape = None;
                    Op::Dense { inputs: flat, outputs: *units }
                }
            };
            flat = op.n_outputs();
            layers.push(Layer {
                weights: vec![0.0; op.n_weights()],
                bias: vec![0.0; op.n_bias()],
                op,
                activation: spec.activation(),
            });
        }
        Ok(Self { input_shape, specs, layers })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map(|l| l.op.n_outputs()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Spatial output shape `[channels, rows, cols]` of each conv layer.
    pub fn conv_output_shapes(&self) -> Vec<[usize; 3]> {
        self.layers
            .iter()
            .filter_map(|l| match l.op {
                Op::Conv(g) => Some([g.out_c, g.out_h, g.out_w]),
                Op::Dense { .. } => None,
            })
            .collect()
    }

    /// Parameter tensors in a fixed order: layer by layer, weights then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect(),
        }
    }

    pub fn same_architecture(&self, other: &QNetwork) -> bool {
        self.input_shape == other.input_shape && self.specs == other.specs
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NeuralError> {
        if input.len() != self.input_len() {
            return Err(NeuralError::ShapeMismatch {
                expected: format!("{:?} ({} values)", self.input_shape, self.input_len()),
                got: format!("{} values", input.len()),
            });
        }
        Ok(())
    }

    /// Q-values for a flattened `[channels][rows][cols]` input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = layer_forward(layer, &x);
            if layer.activation == Activation::Relu {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    fn forward_trace(&self, input: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let z = layer_forward(layer, &x);
            let a = match layer.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::Linear => z.clone(),
            };
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        Trace { inputs, pre, output: x }
    }

    /// Gradients of `(td_target − Q(input, action))²` with respect to every
    /// parameter, accumulated into `grads` scaled by `weight`. Returns Q.
    pub fn accumulate_td_gradient(
        &self,
        input: &[f64],
        action: usize,
        td_target: f64,
        weight: f64,
        grads: &mut Gradients,
    ) -> Result<f64, NeuralError> {
        self.check_input(input)?;
        let n_out = self.n_outputs();
        if action >= n_out {
            return Err(NeuralError::ActionIndex { index: action, outputs: n_out });
        }
        let trace = self.forward_trace(input);
        let q = trace.output[action];
        let mut delta = vec![0.0; n_out];
        delta[action] = weight * 2.0 * (q - td_target);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                for (d, z) in delta.iter_mut().zip(&trace.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (gw, gb) = &mut grads.layers[l];
            delta = layer_backward(layer, &trace.inputs[l], &delta, gw, gb, l > 0);
        }
        Ok(q)
    }

    /// Gradients of `(td_target − Q(input, action))²`.
    pub fn backward(&self, input: &[f64], action: usize, td_target: f64) -> Result<Gradients, NeuralError> {
        let mut g = self.zero_gradients();
        self.accumulate_td_gradient(input, action, td_target, 1.0, &mut g)?;
        Ok(g)
    }

    /// Make `self` a bit-exact copy of `src`'s parameters.
    pub fn copy_weights_from(&mut self, src: &QNetwork) -> Result<(), NeuralError> {
        if !self.same_architecture(src) {
            return Err(NeuralError::ArchitectureMismatch(format!(
                "source has {} layers on input {:?}, destination {} layers on input {:?}",
                src.specs.len(),
                src.input_shape,
                self.specs.len(),
                self.input_shape
            )));
        }
        for (dst, s) in self.layers.iter_mut().zip(&src.layers) {
            dst.weights.copy_from_slice(&s.weights);
            dst.bias.copy_from_slice(&s.bias);
        }
        Ok(())
    }

    /// Replace parameters from tensors in [`Self::tensors`] order.
    pub fn load_tensors(&mut self, tensors: &[Vec<f64>]) -> Result<(), NeuralError> {
        let expected = self.layers.len() * 2;
        if tensors.len() != expected {
            return Err(NeuralError::ArchitectureMismatch(format!("{} tensors for {expected} slots", tensors.len())));
        }
        for (slot, t) in self.tensors_mut().zip(tensors) {
            if slot.len() != t.len() {
                return Err(NeuralError::ShapeMismatch { expected: format!("{} values", slot.len()), got: format!("{} values", t.len()) });
            }
            slot.copy_from_slice(t);
        }
        Ok(())
    }
}

/// Free-function form of [`QNetwork::copy_weights_from`].
pub fn copy_weights(src: &QNetwork, dst: &mut QNetwork) -> Result<(), NeuralError> {
    dst.copy_weights_from(src)
}

/// Dot product with a fixed four-lane summation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Valid kernel offsets `[k0, k1)` and the first input index for an
    /// output coordinate.
    fn span(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize, usize) {
        let start = (o * stride) as isize - pad as isize;
        let k0 = (-start).max(0) as usize;
        let k1 = ((n as isize - start).min(k as isize)).max(k0 as isize) as usize;
        (k0, k1, (start + k0 as isize) as usize)
    }

    /// Gather the receptive field of output `(oy, ox)` in weight order,
    /// zero where it hangs over the padding.
    fn gather(&self, x: &[f64], oy: usize, ox: usize, patch: &mut [f64]) {
        patch.fill(0.0);
        let (ky0, ky1, iy0) = Self::span(oy, self.sh, self.pad_top, self.kh, self.in_h);
        let (kx0, kx1, ix0) = Self::span(ox, self.sw, self.pad_left, self.kw, self.in_w);
        let run = kx1 - kx0;
        for ic in 0..self.in_c {
            for (ky, iy) in (ky0..ky1).zip(iy0..) {
                let src = (ic * self.in_h + iy) * self.in_w + ix0;
                let dst = (ic * self.kh + ky) * self.kw + kx0;
                patch[dst..dst + run].copy_from_slice(&x[src..src + run]);
            }
        }
    }

    /// Add a receptive-field gradient back onto the input gradient.
    fn scatter(&self, dpatch: &[f64], oy: usize, ox: usize, dx: &mut [f64]) {
        let (ky0, ky1, iy0) = Self::span(oy, self.sh, self.pad_top, self.kh, self.in_h);
        let (kx0, kx1, ix0) = Self::span(ox, self.sw, self.pad_left, self.kw, self.in_w);
        let run = kx1 - kx0;
        for ic in 0..self.in_c {
            for (ky, iy) in (ky0..ky1).zip(iy0..) {
                let dst = (ic * self.in_h + iy) * self.in_w + ix0;
                let src = (ic * self.kh + ky) * self.kw + kx0;
                for (d, s) in dx[dst..dst + run].iter_mut().zip(&dpatch[src..src + run]) {
                    *d += s;
                }
            }
        }
    }
}

fn layer_forward(layer: &Layer, x: &[f64]) -> Vec<f64> {
    match layer.op {
        Op::Dense { inputs, outputs } => {
            let mut z = layer.bias.clone();
            for (o, zo) in z.iter_mut().enumerate().take(outputs) {
                *zo += dot(&layer.weights[o * inputs..(o + 1) * inputs], x);
            }
            z
        }
        Op::Conv(g) => {
            let plen = g.patch_len();
            let mut patch = vec![0.0; plen];
            let mut z = vec![0.0; g.out_c * g.out_h * g.out_w];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    g.gather(x, oy, ox, &mut patch);
                    for oc in 0..g.out_c {
                        z[(oc * g.out_h + oy) * g.out_w + ox] =
                            layer.bias[oc] + dot(&layer.weights[oc * plen..(oc + 1) * plen], &patch);
                    }
                }
            }
            z
        }
    }
}

/// Accumulate parameter gradients for pre-activation gradient `dz` and
/// return the gradient with respect to the layer input (empty when
/// `need_input_grad` is false).
fn layer_backward(layer: &Layer, x: &[f64], dz: &[f64], gw: &mut [f64], gb: &mut [f64], need_input_grad: bool) -> Vec<f64> {
    match layer.op {
        Op::Dense { inputs, outputs } => {
            let mut dx = if need_input_grad { vec![0.0; inputs] } else { Vec::new() };
            for o in 0..outputs {
                let d = dz[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                axpy(&mut gw[o * inputs..(o + 1) * inputs], d, x);
                if need_input_grad {
                    axpy(&mut dx, d, &layer.weights[o * inputs..(o + 1) * inputs]);
                }
            }
            dx
        }
        Op::Conv(g) => {
            let plen = g.patch_len();
            let mut patch = vec![0.0; plen];
            let mut dpatch = vec![0.0; plen];
            let mut dx = if need_input_grad { vec![0.0; g.in_c * g.in_h * g.in_w] } else { Vec::new() };
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let at = |oc: usize| (oc * g.out_h + oy) * g.out_w + ox;
                    if (0..g.out_c).all(|oc| dz[at(oc)] == 0.0) {
                        continue;
                    }
                    g.gather(x, oy, ox, &mut patch);
                    dpatch.fill(0.0);
                    for oc in 0..g.out_c {
                        let d = dz[at(oc)];
                        if d == 0.0 {
                            continue;
                        }
                        gb[oc] += d;
                        axpy(&mut gw[oc * plen..(oc + 1) * plen], d, &patch);
                        if need_input_grad {
                            axpy(&mut dpatch, d, &layer.weights[oc * plen..(oc + 1) * plen]);
                        }
                    }
                    if need_input_grad {
                        g.scatter(&dpatch, oy, ox, &mut dx);
                    }
                }
            }
            dx
        }
    }
}
