//! A small trainable neural toolkit: the layers the classifiers need, MSE
//! loss, Adam, finite-difference gradient checking and a checkpoint format.
//!
//! Everything is single-sample and 64-bit. Sequence tensors are `[T, C]`
//! (time by channel); dense layers flatten whatever they receive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NetRng = ChaCha8Rng;

pub fn net_rng(seed: u64) -> NetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got:?}")]
    ShapeMismatch { layer: &'static str, expected: String, got: Vec<usize> },
    #[error("backward called before forward on {0}")]
    NoForwardCache(&'static str),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("index {index} out of range for vocabulary of {vocab}")]
    IndexOutOfRange { index: f64, vocab: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadEpsilon(f64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    fn rows_cols(&self, layer: &'static str) -> Result<(usize, usize), NeuralError> {
        match self.shape.as_slice() {
            [t, c] => Ok((*t, *c)),
            other => Err(NeuralError::ShapeMismatch { layer, expected: "[T, C]".into(), got: other.to_vec() }),
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Param { value, grad }
    }

    fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut NetRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(shape, limit, rng)
    }

    fn uniform(shape: Vec<usize>, limit: f64, rng: &mut NetRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Self::new(Tensor::new(shape, data))
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Forward-pass mode. Dropout draws from the RNG only in training.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut NetRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Embedding { vocab: usize, dim: usize },
    Conv1d { in_channels: usize, out_channels: usize, kernel: usize },
    MaxPool1d { width: usize },
    Dropout { rate: f64 },
    Lstm { input: usize, hidden: usize, return_sequences: bool },
    Tanh,
    Sigmoid,
}

impl LayerSpec {
    pub fn build(&self, rng: &mut NetRng) -> Box<dyn Layer> {
        match *self {
            LayerSpec::Dense { input, output } => Box::new(Dense::new(input, output, rng)),
            LayerSpec::Embedding { vocab, dim } => Box::new(Embedding::new(vocab, dim, rng)),
            LayerSpec::Conv1d { in_channels, out_channels, kernel } => {
                Box::new(Conv1d::new(in_channels, out_channels, kernel, rng))
            }
            LayerSpec::MaxPool1d { width } => Box::new(MaxPool1d::new(width)),
            LayerSpec::Dropout { rate } => Box::new(Dropout::new(rate)),
            LayerSpec::Lstm { input, hidden, return_sequences } => {
                Box::new(Lstm::new(input, hidden, return_sequences, rng))
            }
            LayerSpec::Tanh => Box::new(Activation::tanh()),
            LayerSpec::Sigmoid => Box::new(Activation::sigmoid()),
        }
    }
}

pub trait Layer: Send {
    fn spec(&self) -> LayerSpec;
    fn forward(&mut self, input: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, NeuralError>;
    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError>;
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Dense {
    input: usize,
    output: usize,
    /// `[output, input]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut NetRng) -> Self {
        Dense {
            input,
            output,
            weight: Param::glorot(vec![output, input], input, output, rng),
            bias: Param::new(Tensor::zeros(vec![output])),
            cache: None,
        }
    }
}

impl Layer for Dense {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dense { input: self.input, output: self.output }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        if input.numel() != self.input {
            return Err(NeuralError::ShapeMismatch {
                layer: "dense",
                expected: format!("{} elements", self.input),
                got: input.shape().to_vec(),
            });
        }
        let w = self.weight.value.data();
        let x = input.data();
        let out = (0..self.output)
            .map(|o| {
                let row = &w[o * self.input..(o + 1) * self.input];
                self.bias.value.data()[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        self.cache = Some(input.clone());
        Ok(Tensor::vector(out))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let input = self.cache.as_ref().ok_or(NeuralError::NoForwardCache("dense"))?;
        let x = input.data();
        let up = upstream.data();
        let w = self.weight.value.data();
        let mut dx = vec![0.0; self.input];
        for o in 0..self.output {
            let g = up[o];
            self.bias.grad[o] += g;
            let base = o * self.input;
            for i in 0..self.input {
                self.weight.grad[base + i] += g * x[i];
                dx[i] += g * w[base + i];
            }
        }
        Ok(Tensor::new(input.shape().to_vec(), dx))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Lookup table; the input is a `[T]` tensor of integral ids.
pub struct Embedding {
    vocab: usize,
    dim: usize,
    /// `[vocab, dim]`
    pub table: Param,
    cache: Option<Vec<usize>>,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, rng: &mut NetRng) -> Self {
        Embedding { vocab, dim, table: Param::uniform(vec![vocab, dim], 0.05, rng), cache: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn lookup(&self, id: usize) -> &[f64] {
        &self.table.value.data()[id * self.dim..(id + 1) * self.dim]
    }

    /// Adds `grad` to the gradient row of `id`.
    pub fn accumulate(&mut self, id: usize, grad: &[f64]) {
        let row = &mut self.table.grad[id * self.dim..(id + 1) * self.dim];
        row.iter_mut().zip(grad).for_each(|(r, g)| *r += g);
    }
}

impl Layer for Embedding {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Embedding { vocab: self.vocab, dim: self.dim }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let mut ids = Vec::with_capacity(input.numel());
        for &v in input.data() {
            if v < 0.0 || v.fract() != 0.0 || v as usize >= self.vocab {
                return Err(NeuralError::IndexOutOfRange { index: v, vocab: self.vocab });
            }
            ids.push(v as usize);
        }
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in &ids {
            out.extend_from_slice(self.lookup(id));
        }
        let t = ids.len();
        self.cache = Some(ids);
        Ok(Tensor::new(vec![t, self.dim], out))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let ids = self.cache.take().ok_or(NeuralError::NoForwardCache("embedding"))?;
        for (row, &id) in ids.iter().enumerate() {
            let g = upstream.data()[row * self.dim..(row + 1) * self.dim].to_vec();
            self.accumulate(id, &g);
        }
        let n = ids.len();
        self.cache = Some(ids);
        Ok(Tensor::zeros(vec![n]))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.table]
    }
}

/// Valid (unpadded) 1-D convolution over `[T, C_in]` producing `[T-k+1, C_out]`.
pub struct Conv1d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    /// `[out_channels, kernel, in_channels]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut NetRng) -> Self {
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::glorot(
                vec![out_channels, kernel, in_channels],
                kernel * in_channels,
                kernel * out_channels,
                rng,
            ),
            bias: Param::new(Tensor::zeros(vec![out_channels])),
            cache: None,
        }
    }
}

impl Layer for Conv1d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Conv1d { in_channels: self.in_channels, out_channels: self.out_channels, kernel: self.kernel }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let (t, c) = input.rows_cols("conv1d")?;
        if c != self.in_channels || t < self.kernel {
            return Err(NeuralError::ShapeMismatch {
                layer: "conv1d",
                expected: format!("[T >= {}, {}]", self.kernel, self.in_channels),
                got: input.shape().to_vec(),
            });
        }
        let t_out = t - self.kernel + 1;
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let x = input.data();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let mut out = vec![0.0; t_out * cout];
        for p in 0..t_out {
            let window = &x[p * cin..(p + k) * cin];
            for o in 0..cout {
                let wo = &w[o * k * cin..(o + 1) * k * cin];
                out[p * cout + o] = b[o] + wo.iter().zip(window).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        self.cache = Some(input.clone());
        Ok(Tensor::new(vec![t_out, cout], out))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let input = self.cache.as_ref().ok_or(NeuralError::NoForwardCache("conv1d"))?;
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let t_out = input.shape()[0] - k + 1;
        let x = input.data();
        let w = self.weight.value.data();
        let up = upstream.data();
        let mut dx = vec![0.0; input.numel()];
        for p in 0..t_out {
            for o in 0..cout {
                let g = up[p * cout + o];
                if g == 0.0 {
                    continue;
                }
                self.bias.grad[o] += g;
                let wbase = o * k * cin;
                for j in 0..k * cin {
                    self.weight.grad[wbase + j] += g * x[p * cin + j];
                    dx[p * cin + j] += g * w[wbase + j];
                }
            }
        }
        Ok(Tensor::new(input.shape().to_vec(), dx))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Non-overlapping max pooling along time; a trailing partial window is dropped.
pub struct MaxPool1d {
    width: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(width: usize) -> Self {
        MaxPool1d { width, cache: None }
    }
}

impl Layer for MaxPool1d {
    fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool1d { width: self.width }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let (t, c) = input.rows_cols("maxpool1d")?;
        let t_out = t / self.width;
        if t_out == 0 {
            return Err(NeuralError::ShapeMismatch {
                layer: "maxpool1d",
                expected: format!("[T >= {}, C]", self.width),
                got: input.shape().to_vec(),
            });
        }
        let x = input.data();
        let mut out = vec![0.0; t_out * c];
        let mut argmax = vec![0; t_out * c];
        for p in 0..t_out {
            for ch in 0..c {
                let mut best = p * self.width;
                for s in p * self.width + 1..(p + 1) * self.width {
                    if x[s * c + ch] > x[best * c + ch] {
                        best = s;
                    }
                }
                out[p * c + ch] = x[best * c + ch];
                argmax[p * c + ch] = best * c + ch;
            }
        }
        self.cache = Some((argmax, input.shape().to_vec()));
        Ok(Tensor::new(vec![t_out, c], out))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let (argmax, shape) = self.cache.as_ref().ok_or(NeuralError::NoForwardCache("maxpool1d"))?;
        let mut dx = Tensor::zeros(shape.clone());
        for (g, &idx) in upstream.data().iter().zip(argmax) {
            dx.data[idx] += g;
        }
        Ok(dx)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in training.
pub struct Dropout {
    rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        Dropout { rate, mask: None }
    }
}

impl Layer for Dropout {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout { rate: self.rate }
    }

    fn forward(&mut self, input: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        match mode {
            Mode::Train(rng) if self.rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.rate);
                let mask: Vec<f64> =
                    (0..input.numel()).map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep }).collect();
                let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                self.mask = Some(mask);
                Ok(Tensor::new(input.shape().to_vec(), data))
            }
            _ => {
                self.mask = None;
                Ok(input.clone())
            }
        }
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        match &self.mask {
            Some(mask) => {
                let data = upstream.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Ok(Tensor::new(upstream.shape().to_vec(), data))
            }
            None => Ok(upstream.clone()),
        }
    }
}

#[derive(Clone, Copy)]
enum ActivationKind {
    Tanh,
    Sigmoid,
}

pub struct Activation {
    kind: ActivationKind,
    output: Option<Tensor>,
}

impl Activation {
    pub fn tanh() -> Self {
        Activation { kind: ActivationKind::Tanh, output: None }
    }

    pub fn sigmoid() -> Self {
        Activation { kind: ActivationKind::Sigmoid, output: None }
    }
}

impl Layer for Activation {
    fn spec(&self) -> LayerSpec {
        match self.kind {
            ActivationKind::Tanh => LayerSpec::Tanh,
            ActivationKind::Sigmoid => LayerSpec::Sigmoid,
        }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let f: fn(f64) -> f64 = match self.kind {
            ActivationKind::Tanh => f64::tanh,
            ActivationKind::Sigmoid => sigmoid,
        };
        let out = Tensor::new(input.shape().to_vec(), input.data().iter().map(|&x| f(x)).collect());
        self.output = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let y = self.output.as_ref().ok_or(NeuralError::NoForwardCache("activation"))?;
        let kind = self.kind;
        let data = upstream
            .data()
            .iter()
            .zip(y.data())
            .map(|(g, y)| match kind {
                ActivationKind::Tanh => g * (1.0 - y * y),
                ActivationKind::Sigmoid => g * y * (1.0 - y),
            })
            .collect();
        Ok(Tensor::new(upstream.shape().to_vec(), data))
    }
}

struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Standard LSTM over `[T, input]`. Gate rows are ordered input, forget,
/// candidate, output. Returns `[T, hidden]` or the final `[hidden]` state.
pub struct Lstm {
    input: usize,
    hidden: usize,
    return_sequences: bool,
    /// `[4 * hidden, input]`
    pub w: Param,
    /// `[4 * hidden, hidden]`
    pub u: Param,
    /// `[4 * hidden]`
    pub b: Param,
    cache: Option<Vec<LstmStep>>,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, return_sequences: bool, rng: &mut NetRng) -> Self {
        let mut b = Param::new(Tensor::zeros(vec![4 * hidden]));
        b.value.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Lstm {
            input,
            hidden,
            return_sequences,
            w: Param::glorot(vec![4 * hidden, input], input, 4 * hidden, rng),
            u: Param::glorot(vec![4 * hidden, hidden], hidden, 4 * hidden, rng),
            b,
            cache: None,
        }
    }
}

impl Layer for Lstm {
    fn spec(&self) -> LayerSpec {
        LayerSpec::Lstm { input: self.input, hidden: self.hidden, return_sequences: self.return_sequences }
    }

    fn forward(&mut self, input: &Tensor, _mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let (t, c) = input.rows_cols("lstm")?;
        if c != self.input {
            return Err(NeuralError::ShapeMismatch {
                layer: "lstm",
                expected: format!("[T, {}]", self.input),
                got: input.shape().to_vec(),
            });
        }
        let (n, h) = (self.input, self.hidden);
        let w = self.w.value.data();
        let u = self.u.value.data();
        let b = self.b.value.data();
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut steps = Vec::with_capacity(t);
        let mut outputs = Vec::with_capacity(t * h);
        for step in 0..t {
            let x = &input.data()[step * n..(step + 1) * n];
            let mut z = b.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let wr = &w[r * n..(r + 1) * n];
                let ur = &u[r * h..(r + 1) * h];
                *zr += wr.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + ur.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
            }
            let i: Vec<f64> = z[0..h].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
            let o: Vec<f64> = z[3 * h..4 * h].iter().map(|&v| sigmoid(v)).collect();
            let c_new: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..h).map(|k| o[k] * tanh_c[k]).collect();
            outputs.extend_from_slice(&h_new);
            steps.push(LstmStep {
                x: x.to_vec(),
                h_prev: std::mem::replace(&mut h_prev, h_new),
                c_prev: std::mem::replace(&mut c_prev, c_new),
                i,
                f,
                g,
                o,
                tanh_c,
            });
        }
        self.cache = Some(steps);
        if self.return_sequences {
            Ok(Tensor::new(vec![t, h], outputs))
        } else {
            Ok(Tensor::vector(h_prev))
        }
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let steps = self.cache.as_ref().ok_or(NeuralError::NoForwardCache("lstm"))?;
        let (n, h) = (self.input, self.hidden);
        let t = steps.len();
        let w = self.w.value.data();
        let u = self.u.value.data();
        let mut dx = vec![0.0; t * n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for (step_idx, s) in steps.iter().enumerate().rev() {
            let mut dh = dh_next.clone();
            if self.return_sequences {
                let up = &upstream.data()[step_idx * h..(step_idx + 1) * h];
                dh.iter_mut().zip(up).for_each(|(a, b)| *a += b);
            } else if step_idx + 1 == t {
                dh.iter_mut().zip(upstream.data()).for_each(|(a, b)| *a += b);
            }
            for k in 0..h {
                let d_o = dh[k] * s.tanh_c[k];
                let dc = dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                let di = dc * s.g[k];
                let dg = dc * s.i[k];
                let df = dc * s.c_prev[k];
                dc_next[k] = dc * s.f[k];
                dz[k] = di * s.i[k] * (1.0 - s.i[k]);
                dz[h + k] = df * s.f[k] * (1.0 - s.f[k]);
                dz[2 * h + k] = dg * (1.0 - s.g[k] * s.g[k]);
                dz[3 * h + k] = d_o * s.o[k] * (1.0 - s.o[k]);
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dxt = &mut dx[step_idx * n..(step_idx + 1) * n];
            for (r, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                self.b.grad[r] += g;
                for j in 0..n {
                    self.w.grad[r * n + j] += g * s.x[j];
                    dxt[j] += g * w[r * n + j];
                }
                for j in 0..h {
                    self.u.grad[r * h + j] += g * s.h_prev[j];
                    dh_next[j] += g * u[r * h + j];
                }
            }
        }
        Ok(Tensor::new(vec![t, n], dx))
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.u, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

/// Anything trainable with a scalar-valued loss on its output.
pub trait Model {
    type Input: ?Sized;
    fn forward(&mut self, input: &Self::Input, mode: &mut Mode<'_>) -> Result<Tensor, NeuralError>;
    fn backward(&mut self, upstream: &Tensor) -> Result<(), NeuralError>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut NetRng) -> Self {
        Sequential { layers: specs.iter().map(|s| s.build(rng)).collect() }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Backward pass that also returns the gradient w.r.t. the network input.
    pub fn backward_input(&mut self, upstream: &Tensor) -> Result<Tensor, NeuralError> {
        let mut grad = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }
}

impl Model for Sequential {
    type Input = Tensor;

    fn forward(&mut self, input: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<(), NeuralError> {
        self.backward_input(upstream).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse(prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NeuralError> {
    if prediction.numel() != target.numel() {
        return Err(NeuralError::ShapeMismatch {
            layer: "mse",
            expected: format!("{} elements", prediction.numel()),
            got: target.shape().to_vec(),
        });
    }
    let n = prediction.numel().max(1) as f64;
    let mut loss = 0.0;
    let grad = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, Tensor::new(prediction.shape().to_vec(), grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    #[serde(skip)]
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Bias-corrected Adam update; gradients are zeroed afterwards.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.moments.len() != params.len() {
            self.moments = params.iter().map(|p| (vec![0.0; p.grad.len()], vec![0.0; p.grad.len()])).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (param, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            for (j, g) in param.grad.iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * *g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * *g * *g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param.value.data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                *g = 0.0;
            }
        }
    }
}

pub fn zero_grads(params: Vec<&mut Param>) {
    params.into_iter().for_each(Param::zero_grad);
}

/// Denominator floor for [`gradient_check`]. Central differences of an O(1)
/// loss at eps = 1e-5 carry roundoff near 1e-11, so gradients below this size
/// cannot be compared in relative terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the MSE loss against central differences
/// and returns the largest `|a - n| / max(|a|, |n|, GRADIENT_FLOOR)` over all
/// parameters. Runs in eval mode, so dropout is inactive.
pub fn gradient_check<M: Model>(
    model: &mut M,
    input: &M::Input,
    target: &Tensor,
    eps: f64,
) -> Result<f64, NeuralError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NeuralError::BadEpsilon(eps));
    }
    let loss_at = |model: &mut M| -> Result<f64, NeuralError> {
        let out = model.forward(input, &mut Mode::Eval)?;
        let (loss, _) = mse(&out, target)?;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(NeuralError::NonFiniteLoss)
        }
    };

    zero_grads(model.params_mut());
    let out = model.forward(input, &mut Mode::Eval)?;
    let (loss, grad) = mse(&out, target)?;
    if !loss.is_finite() {
        return Err(NeuralError::NonFiniteLoss);
    }
    model.backward(&grad)?;
    let analytic: Vec<Vec<f64>> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
    zero_grads(model.params_mut());

    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let original = model.params_mut()[pi].value.data[j];
            model.params_mut()[pi].value.data[j] = original + eps;
            let plus = loss_at(model)?;
            model.params_mut()[pi].value.data[j] = original - eps;
            let minus = loss_at(model)?;
            model.params_mut()[pi].value.data[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Serialized model: a JSON manifest followed by a flat parameter blob.
///
/// Layout: magic `CLMODEL\0` (8 bytes) ‖ format version (u32 LE) ‖ manifest
/// length (u64 LE) ‖ manifest UTF-8 JSON ‖ parameter count (u64 LE) ‖
/// parameters as f64 LE.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLMODEL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(28 + manifest.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let bad = |m: &str| NeuralError::Checkpoint(m.to_string());
        let take = |from: usize, len: usize| bytes.get(from..from + len).ok_or_else(|| bad("truncated checkpoint"));
        if take(0, 8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
        let manifest = serde_json::from_slice(take(20, mlen)?).map_err(|e| bad(&e.to_string()))?;
        let pos = 20 + mlen;
        let count = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        let blob = take(pos + 8, count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
        if bytes.len() != pos + 8 + count * 8 {
            return Err(bad("trailing bytes after parameter blob"));
        }
        let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Checkpoint { manifest, params })
    }
}

pub fn flatten_params(params: &[&Param]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
}

pub fn load_params(params: Vec<&mut Param>, flat: &[f64]) -> Result<(), NeuralError> {
    let needed: usize = params.iter().map(|p| p.value.numel()).sum();
    if needed != flat.len() {
        return Err(NeuralError::Checkpoint(format!("expected {needed} parameters, found {}", flat.len())));
    }
    let mut offset = 0;
    for p in params {
        let n = p.value.numel();
        p.value.data.copy_from_slice(&flat[offset..offset + n]);
        p.zero_grad();
        offset += n;
    }
    Ok(())
}
