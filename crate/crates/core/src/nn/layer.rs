//! Layers with hand-written forward and backward passes.
//!
//! Activation layouts: dense layers take `[N, ...]` and flatten the trailing
//! dimensions; 1D convolutions and batch normalisation are channels-last,
//! `[N, L, C]` (batch normalisation also accepts `[N, C]`).

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv1d {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Relu,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: true,
        }
    }

    pub fn conv1d(kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv1d {
            kernel,
            in_channels,
            out_channels,
            stride: 1,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs, .. } => inputs >= 1 && outputs >= 1,
            LayerSpec::Conv1d {
                kernel,
                in_channels,
                out_channels,
                stride,
            } => kernel >= 1 && in_channels >= 1 && out_channels >= 1 && stride >= 1,
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => channels >= 1 && epsilon > 0.0 && (0.0..1.0).contains(&momentum),
            LayerSpec::Relu => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("invalid layer spec {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn he_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect()
}

/// `y = W·x + b` with `W` stored `[outputs × inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    /// Empty when the layer has no bias.
    pub bias: Vec<T>,
}

/// Valid (unpadded) cross-correlation with weights stored
/// `[(tap·in_channels + c) × out_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T> Conv1d<T> {
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        (input_len >= self.kernel).then(|| (input_len - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// Normalise with running statistics during training too, leaving them unchanged.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv1d(Conv1d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
}

/// Activations saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Dense { input: Tensor<T> },
    Conv1d { input: Tensor<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { input: Tensor<T> },
}

impl<T: Scalar> Layer<T> {
    pub fn build(spec: LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            LayerSpec::Dense { inputs, outputs, bias } => Layer::Dense(Dense {
                inputs,
                outputs,
                weight: he_uniform(inputs * outputs, inputs, rng),
                bias: if bias { vec![T::zero(); outputs] } else { Vec::new() },
            }),
            LayerSpec::Conv1d {
                kernel,
                in_channels,
                out_channels,
                stride,
            } => Layer::Conv1d(Conv1d {
                kernel,
                in_channels,
                out_channels,
                stride,
                weight: he_uniform(kernel * in_channels * out_channels, kernel * in_channels, rng),
                bias: vec![T::zero(); out_channels],
            }),
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => Layer::BatchNorm(BatchNorm {
                channels,
                epsilon,
                momentum,
                gamma: vec![T::one(); channels],
                beta: vec![T::zero(); channels],
                running_mean: vec![T::zero(); channels],
                running_var: vec![T::one(); channels],
                frozen: false,
            }),
            LayerSpec::Relu => Layer::Relu,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                bias: !d.bias.is_empty(),
            },
            Layer::Conv1d(c) => LayerSpec::Conv1d {
                kernel: c.kernel,
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                stride: c.stride,
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm {
                channels: b.channels,
                epsilon: b.epsilon,
                momentum: b.momentum,
            },
            Layer::Relu => LayerSpec::Relu,
        }
    }

    /// Trainable parameter blocks in a fixed order.
    pub fn params(&self) -> Vec<&[T]> {
        match self {
            Layer::Dense(d) if d.bias.is_empty() => vec![&d.weight],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv1d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Relu => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Dense(d) => {
                if d.bias.is_empty() {
                    vec![&mut d.weight]
                } else {
                    vec![&mut d.weight, &mut d.bias]
                }
            }
            Layer::Conv1d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Relu => vec![],
        }
    }

    fn shape_error(&self, input: &[usize], expected: String) -> Error {
        Error::Dimension(format!(
            "{} layer {:?} got input shape {input:?}; expected {expected}",
            self.spec().name(),
            self.spec(),
        ))
    }

    /// Output shape for an input shape, or a dimension error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let fake = |msg: String| self.shape_error(input, msg);
        match self {
            Layer::Dense(d) => {
                let features: usize = input[1..].iter().product();
                if input.len() < 2 || features != d.inputs {
                    return Err(fake(format!("[N, {}]", d.inputs)));
                }
                Ok(vec![input[0], d.outputs])
            }
            Layer::Conv1d(c) => {
                let len = conv_len(input, c.in_channels)
                    .ok_or_else(|| fake(format!("[N, L, {}]", c.in_channels)))?;
                let out = c
                    .output_len(len)
                    .ok_or_else(|| fake(format!("length >= kernel {}", c.kernel)))?;
                Ok(vec![input[0], out, c.out_channels])
            }
            Layer::BatchNorm(b) => {
                if input.len() < 2 || input[input.len() - 1] != b.channels {
                    return Err(fake(format!("[N, .., {}]", b.channels)));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
        }
    }

    /// Inference-mode forward pass; batch normalisation uses running statistics.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.output_shape(input.shape())?;
        Ok(match self {
            Layer::Dense(d) => dense_forward(d, input, shape),
            Layer::Conv1d(c) => conv_forward(c, input, shape),
            Layer::BatchNorm(b) => {
                let (mean, inv_std) = b.running_affine();
                let mut out = input.clone();
                let c = b.channels;
                for row in out.data_mut().chunks_exact_mut(c) {
                    for (ch, v) in row.iter_mut().enumerate() {
                        let xhat = (v.as_f64() - mean[ch]) * inv_std[ch];
                        *v = T::from_f64(b.gamma[ch].as_f64() * xhat + b.beta[ch].as_f64());
                    }
                }
                out
            }
            Layer::Relu => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                out
            }
        })
    }

    /// Forward pass. In training mode the returned cache feeds [`Layer::backward`]
    /// and batch normalisation updates its running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        if mode == Mode::Infer {
            return Ok((self.infer(input)?, None));
        }
        let shape = self.output_shape(input.shape())?;
        Ok(match self {
            Layer::Dense(d) => {
                let out = dense_forward(d, input, shape);
                (out, Some(Cache::Dense { input: input.clone() }))
            }
            Layer::Conv1d(c) => {
                let out = conv_forward(c, input, shape);
                (out, Some(Cache::Conv1d { input: input.clone() }))
            }
            Layer::BatchNorm(b) => {
                let (out, cache) = b.forward_train(input);
                (out, Some(cache))
            }
            Layer::Relu => {
                let out = self.infer(input)?;
                (out, Some(Cache::Relu { input: input.clone() }))
            }
        })
    }

    /// Gradients of the forward map: returns the input gradient (when
    /// requested) and one gradient block per entry of [`Layer::params`].
    pub fn backward(
        &self,
        upstream: &Tensor<T>,
        cache: &Cache<T>,
        want_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Vec<T>>)> {
        let mismatch = || {
            Error::State(format!(
                "{} layer received a cache from a different layer kind",
                self.spec().name()
            ))
        };
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { input }) => {
                check_upstream(upstream, &self.output_shape(input.shape())?)?;
                Ok(dense_backward(d, input, upstream, want_input_grad))
            }
            (Layer::Conv1d(c), Cache::Conv1d { input }) => {
                check_upstream(upstream, &self.output_shape(input.shape())?)?;
                Ok(conv_backward(c, input, upstream, want_input_grad))
            }
            (Layer::BatchNorm(b), Cache::BatchNorm { xhat, inv_std, batch_stats }) => {
                if upstream.len() != xhat.len() {
                    return Err(Error::State(format!(
                        "batchnorm cache holds {} values but upstream gradient has {}",
                        xhat.len(),
                        upstream.len()
                    )));
                }
                Ok(b.backward(upstream, xhat, inv_std, *batch_stats))
            }
            (Layer::Relu, Cache::Relu { input }) => {
                check_upstream(upstream, input.shape())?;
                let mut grad = upstream.clone();
                for (g, x) in grad.data_mut().iter_mut().zip(input.data()) {
                    if *x <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok((Some(grad), Vec::new()))
            }
            _ => Err(mismatch()),
        }
    }
}

fn check_upstream<T: Scalar>(upstream: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if upstream.shape() != expected {
        return Err(Error::State(format!(
            "upstream gradient shape {:?} does not match cached forward output {expected:?}",
            upstream.shape()
        )));
    }
    Ok(())
}

fn conv_len(shape: &[usize], in_channels: usize) -> Option<usize> {
    match shape.len() {
        2 if in_channels == 1 => Some(shape[1]),
        3 if shape[2] == in_channels => Some(shape[1]),
        _ => None,
    }
}

fn dense_forward<T: Scalar>(d: &Dense<T>, input: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let n = input.batch();
    let mut out = vec![T::zero(); n * d.outputs];
    if !d.bias.is_empty() {
        for row in out.chunks_exact_mut(d.outputs) {
            row.copy_from_slice(&d.bias);
        }
    }
    T::gemm(
        n, d.inputs, d.outputs,
        input.data(), d.inputs, 1,
        &d.weight, 1, d.inputs,
        T::one(), &mut out, d.outputs, 1,
    );
    Tensor::new(shape, out).expect("dense output shape")
}

fn dense_backward<T: Scalar>(
    d: &Dense<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<Vec<T>>) {
    let n = input.batch();
    let dy = upstream.data();
    let mut dw = vec![T::zero(); d.weight.len()];
    T::gemm(
        d.outputs, n, d.inputs,
        dy, 1, d.outputs,
        input.data(), d.inputs, 1,
        T::zero(), &mut dw, d.inputs, 1,
    );
    let mut grads = vec![dw];
    if !d.bias.is_empty() {
        let mut db = vec![0.0f64; d.outputs];
        for row in dy.chunks_exact(d.outputs) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g.as_f64();
            }
        }
        grads.push(db.into_iter().map(T::from_f64).collect());
    }
    let dx = want_input_grad.then(|| {
        let mut dx = vec![T::zero(); input.len()];
        T::gemm(
            n, d.outputs, d.inputs,
            dy, d.outputs, 1,
            &d.weight, d.inputs, 1,
            T::zero(), &mut dx, d.inputs, 1,
        );
        Tensor::new(input.shape().to_vec(), dx).expect("dense input grad shape")
    });
    (dx, grads)
}

fn conv_forward<T: Scalar>(c: &Conv1d<T>, input: &Tensor<T>, shape: Vec<usize>) -> Tensor<T> {
    let n = input.batch();
    let len = input.features() / c.in_channels;
    let out_len = shape[1];
    let in_stride = len * c.in_channels;
    let out_stride = out_len * c.out_channels;
    let mut out = vec![T::zero(); n * out_stride];
    for (s, dst) in out.chunks_exact_mut(out_stride).enumerate() {
        for row in dst.chunks_exact_mut(c.out_channels) {
            row.copy_from_slice(&c.bias);
        }
        let src = &input.data()[s * in_stride..(s + 1) * in_stride];
        // rows of the implicit im2col matrix overlap: row t starts at t·stride·C_in
        T::gemm(
            out_len, c.kernel * c.in_channels, c.out_channels,
            src, c.stride * c.in_channels, 1,
            &c.weight, c.out_channels, 1,
            T::one(), dst, c.out_channels, 1,
        );
    }
    Tensor::new(shape, out).expect("conv output shape")
}

fn conv_backward<T: Scalar>(
    c: &Conv1d<T>,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
    want_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<Vec<T>>) {
    let n = input.batch();
    let len = input.features() / c.in_channels;
    let out_len = upstream.shape()[1];
    let taps = c.kernel * c.in_channels;
    let in_stride = len * c.in_channels;
    let out_stride = out_len * c.out_channels;
    let mut dw = vec![T::zero(); c.weight.len()];
    let mut db = vec![0.0f64; c.out_channels];
    let mut dx = want_input_grad.then(|| vec![T::zero(); input.len()]);
    let mut dcols = vec![T::zero(); if want_input_grad { out_len * taps } else { 0 }];
    for s in 0..n {
        let src = &input.data()[s * in_stride..(s + 1) * in_stride];
        let dy = &upstream.data()[s * out_stride..(s + 1) * out_stride];
        T::gemm(
            taps, out_len, c.out_channels,
            src, 1, c.stride * c.in_channels,
            dy, c.out_channels, 1,
            T::one(), &mut dw, c.out_channels, 1,
        );
        for row in dy.chunks_exact(c.out_channels) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g.as_f64();
            }
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                out_len, c.out_channels, taps,
                dy, c.out_channels, 1,
                &c.weight, 1, c.out_channels,
                T::zero(), &mut dcols, taps, 1,
            );
            let dst = &mut dx[s * in_stride..(s + 1) * in_stride];
            for (t, row) in dcols.chunks_exact(taps).enumerate() {
                let start = t * c.stride * c.in_channels;
                for (d, &g) in dst[start..start + taps].iter_mut().zip(row) {
                    *d = *d + g;
                }
            }
        }
    }
    let grads = vec![dw, db.into_iter().map(T::from_f64).collect()];
    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d).expect("conv input grad shape"));
    (dx, grads)
}

impl<T: Scalar> BatchNorm<T> {
    fn running_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v.as_f64() + self.epsilon).sqrt())
            .collect();
        (mean, inv_std)
    }

    fn forward_train(&mut self, input: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
        let c = self.channels;
        let m = input.len() / c;
        let (mean, inv_std) = if self.frozen {
            self.running_affine()
        } else {
            let mut sum = vec![0.0f64; c];
            for row in input.data().chunks_exact(c) {
                for (acc, v) in sum.iter_mut().zip(row) {
                    *acc += v.as_f64();
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
            let mut sq = vec![0.0f64; c];
            for row in input.data().chunks_exact(c) {
                for ((acc, v), mu) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - mu;
                    *acc += d * d;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / m as f64).collect();
            let unbiased = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            let mom = self.momentum;
            for ch in 0..c {
                let rm = self.running_mean[ch].as_f64();
                let rv = self.running_var[ch].as_f64();
                self.running_mean[ch] = T::from_f64(mom * rm + (1.0 - mom) * mean[ch]);
                self.running_var[ch] = T::from_f64(mom * rv + (1.0 - mom) * var[ch] * unbiased);
            }
            let inv_std = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
            (mean, inv_std)
        };
        let mut xhat = vec![T::zero(); input.len()];
        let mut out = vec![T::zero(); input.len()];
        for ((row, xr), orow) in input
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let xh = (row[ch].as_f64() - mean[ch]) * inv_std[ch];
                xr[ch] = T::from_f64(xh);
                orow[ch] = T::from_f64(self.gamma[ch].as_f64() * xh + self.beta[ch].as_f64());
            }
        }
        let out = Tensor::new(input.shape().to_vec(), out).expect("batchnorm output shape");
        (
            out,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: !self.frozen,
            },
        )
    }

    fn backward(
        &self,
        upstream: &Tensor<T>,
        xhat: &[T],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> (Option<Tensor<T>>, Vec<Vec<T>>) {
        let c = self.channels;
        let m = (upstream.len() / c) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for (dy, xh) in upstream.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                let g = dy[ch].as_f64();
                dgamma[ch] += g * xh[ch].as_f64();
                dbeta[ch] += g;
            }
        }
        let mut dx = vec![T::zero(); upstream.len()];
        for ((dy, xh), out) in upstream
            .data()
            .chunks_exact(c)
            .zip(xhat.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let gamma = self.gamma[ch].as_f64();
                let g = dy[ch].as_f64();
                out[ch] = T::from_f64(if batch_stats {
                    // sums of dxhat and dxhat·xhat are gamma·dbeta and gamma·dgamma
                    gamma * inv_std[ch] / m
                        * (m * g - dbeta[ch] - xh[ch].as_f64() * dgamma[ch])
                } else {
                    gamma * inv_std[ch] * g
                });
            }
        }
        let grads = vec![
            dgamma.into_iter().map(T::from_f64).collect(),
            dbeta.into_iter().map(T::from_f64).collect(),
        ];
        (
            Some(Tensor::new(upstream.shape().to_vec(), dx).expect("batchnorm grad shape")),
            grads,
        )
    }
}
