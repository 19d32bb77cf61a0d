//! Fixed-topology feed-forward network with exact reverse-mode gradients.
//!
//! Parameters live in one flat buffer. For layer `l` with `in` inputs and `out`
//! outputs, the weights are stored row-major (`out x in`, one row per output
//! unit) followed by the `out` biases. Gradients use the same layout, so Adam,
//! gradient clipping and checkpointing all operate on plain slices.
//!
//! Hidden layers apply the configured activation; the final layer is affine.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

const CHECKPOINT_MAGIC: &str = "actsel-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Hidden-layer non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

/// Multi-layer perceptron over `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Result of a single-sample backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    /// Gradient w.r.t. every parameter, same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    /// Gradient w.r.t. the network input.
    pub input: Vec<f64>,
}

/// Cached activations of a batched forward pass, consumed by
/// [`Mlp::backward_batch`].
#[derive(Debug, Clone)]
pub struct BatchTrace {
    rows: usize,
    // acts[0] is the input batch, acts[l + 1] the output of layer l.
    acts: Vec<Vec<f64>>,
}

impl BatchTrace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Network outputs, row-major `rows x output_dim`.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// Network with every parameter set to zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        let mut layout = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for pair in sizes.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            let weights = offset;
            let bias = weights + inputs * outputs;
            offset = bias + outputs;
            layout.push(LayerLayout {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            layout,
            params: vec![0.0; offset],
        })
    }

    /// Orthogonally initialized network.
    ///
    /// Hidden layers use gain `sqrt(2)`, the output layer uses `output_gain`.
    /// Biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activation: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        let last = net.layout.len() - 1;
        for (l, lay) in net.layout.clone().into_iter().enumerate() {
            let gain = if l == last {
                output_gain
            } else {
                std::f64::consts::SQRT_2
            };
            let w = orthogonal(lay.outputs, lay.inputs, rng);
            let dst = &mut net.params[lay.weights..lay.weights + lay.inputs * lay.outputs];
            for (d, s) in dst.iter_mut().zip(w) {
                *d = gain * s;
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated at construction")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let lay = self.layout[layer];
        lay.weights..lay.bias
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let lay = self.layout[layer];
        lay.bias..lay.bias + lay.outputs
    }

    /// Parameter indices of the weights feeding output unit `row` of `layer`.
    pub fn weight_row_range(&self, layer: usize, row: usize) -> Range<usize> {
        let lay = self.layout[layer];
        assert!(row < lay.outputs, "row {row} out of range");
        let start = lay.weights + row * lay.inputs;
        start..start + lay.inputs
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.input_dim(), x.len())?;
        let trace = self.forward_batch(x, 1)?;
        Ok(trace.output().to_vec())
    }

    /// Gradients of `<upstream, forward(x)>` w.r.t. parameters and input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Backward> {
        check_len("mlp input", self.input_dim(), x.len())?;
        check_len("mlp upstream gradient", self.output_dim(), upstream.len())?;
        let trace = self.forward_batch(x, 1)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward_batch(&trace, upstream, &mut params, true)?;
        Ok(Backward { params, input })
    }

    /// Forward pass over `rows` samples stored row-major in `xs`.
    pub fn forward_batch(&self, xs: &[f64], rows: usize) -> Result<BatchTrace> {
        check_len("mlp batch input", rows * self.input_dim(), xs.len())?;
        let last = self.layout.len() - 1;
        let mut acts = Vec::with_capacity(self.layout.len() + 1);
        acts.push(xs.to_vec());
        for (l, lay) in self.layout.iter().enumerate() {
            let input = &acts[l];
            let w = &self.params[lay.weights..lay.bias];
            let b = &self.params[lay.bias..lay.bias + lay.outputs];
            let mut out = vec![0.0; rows * lay.outputs];
            for r in 0..rows {
                let x = &input[r * lay.inputs..(r + 1) * lay.inputs];
                let y = &mut out[r * lay.outputs..(r + 1) * lay.outputs];
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &w[o * lay.inputs..(o + 1) * lay.inputs];
                    *yo = b[o] + dot(row, x);
                }
                if l != last {
                    for v in y.iter_mut() {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            acts.push(out);
        }
        Ok(BatchTrace { rows, acts })
    }

    /// Accumulates into `grads` the gradient of `sum_r <upstream_r, output_r>`.
    ///
    /// Returns the input gradient (row-major) when `want_input` is set,
    /// otherwise an empty vector.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        upstream: &[f64],
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Vec<f64>> {
        let rows = trace.rows;
        check_len("mlp upstream gradient", rows * self.output_dim(), upstream.len())?;
        check_len("mlp gradient buffer", self.params.len(), grads.len())?;
        let last = self.layout.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..self.layout.len()).rev() {
            let lay = self.layout[l];
            if l != last {
                for (d, &y) in delta.iter_mut().zip(&trace.acts[l + 1]) {
                    *d *= self.activation.derivative_at_output(y);
                }
            }
            let input = &trace.acts[l];
            let (gw, gb) = grads[lay.weights..lay.bias + lay.outputs].split_at_mut(lay.bias - lay.weights);
            for r in 0..rows {
                let x = &input[r * lay.inputs..(r + 1) * lay.inputs];
                let d = &delta[r * lay.outputs..(r + 1) * lay.outputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    axpy(dv, x, &mut gw[o * lay.inputs..(o + 1) * lay.inputs]);
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = &self.params[lay.weights..lay.bias];
            let mut prev = vec![0.0; rows * lay.inputs];
            for r in 0..rows {
                let d = &delta[r * lay.outputs..(r + 1) * lay.outputs];
                let p = &mut prev[r * lay.inputs..(r + 1) * lay.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, &w[o * lay.inputs..(o + 1) * lay.inputs], p);
                    }
                }
            }
            delta = prev;
        }
        Ok(if want_input { delta } else { Vec::new() })
    }

    /// Versioned plain-text checkpoint: header, layer sizes, then each
    /// layer's weight rows followed by its bias row.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "activation {}", self.activation.name());
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        for (l, lay) in self.layout.iter().enumerate() {
            let _ = writeln!(out, "weights {l}");
            for o in 0..lay.outputs {
                let row = &self.params[lay.weights + o * lay.inputs..lay.weights + (o + 1) * lay.inputs];
                let _ = writeln!(out, "{}", join_floats(row));
            }
            let _ = writeln!(out, "bias {l}");
            let _ = writeln!(out, "{}", join_floats(&self.params[lay.bias..lay.bias + lay.outputs]));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing header"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let activation = lines
            .next()
            .and_then(|l| l.strip_prefix("activation "))
            .and_then(|a| Activation::parse(a.trim()))
            .ok_or_else(|| bad("missing activation"))?;
        let sizes: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("sizes "))
            .ok_or_else(|| bad("missing sizes"))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad layer size")))
            .collect::<Result<_>>()?;
        let mut net = Self::zeros(&sizes, activation)?;
        for l in 0..net.layout.len() {
            let lay = net.layout[l];
            expect_tag(lines.next(), "weights", l)?;
            for o in 0..lay.outputs {
                let row = parse_floats(lines.next(), lay.inputs)?;
                let start = lay.weights + o * lay.inputs;
                net.params[start..start + lay.inputs].copy_from_slice(&row);
            }
            expect_tag(lines.next(), "bias", l)?;
            let bias = parse_floats(lines.next(), lay.outputs)?;
            net.params[lay.bias..lay.bias + lay.outputs].copy_from_slice(&bias);
        }
        if lines.next().is_some() {
            return Err(bad("trailing data"));
        }
        if !net.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(net)
    }
}

fn expect_tag(line: Option<&str>, tag: &str, layer: usize) -> Result<()> {
    let expected = format!("{tag} {layer}");
    match line {
        Some(l) if l.trim() == expected => Ok(()),
        _ => Err(Error::Checkpoint(format!("expected '{expected}'"))),
    }
}

fn parse_floats(line: Option<&str>, n: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Checkpoint(format!("bad number '{v}'"))))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(Error::Checkpoint(format!(
            "expected {n} values, found {}",
            vals.len()
        )));
    }
    Ok(vals)
}

fn join_floats(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|v| format!("{v:?}")).collect();
    parts.join(" ")
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `rows x cols` matrix with orthonormal rows or columns, row-major.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_hyper(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one bias-corrected Adam update.
    ///
    /// A non-finite gradient, or an update that would produce a non-finite
    /// parameter, leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradients", self.m.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradient"));
        }
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut next = params.to_vec();
        for i in 0..next.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if next.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("adam update"));
        }
        params.copy_from_slice(&next);
        self.m = m;
        self.v = v;
        self.step = t;
        Ok(())
    }
}

/// Scales the concatenation of `parts` to global L2 norm at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(parts: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in parts.iter_mut() {
            for g in p.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}
