//! Central finite-difference gradient oracle.
//!
//! The numeric side only ever calls forward passes and loss values, so it
//! stays independent of every backward implementation it checks.

use super::layer::Cache;
use super::loss::{cosine_sa_loss, softmax_cross_entropy};
use super::network::Sequential;
use super::tensor::Tensor;
use crate::error::Result;

/// Absolute denominator floor for all-zero gradients.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

/// Entries smaller than this fraction of the largest gradient entry are
/// compared on that scale: their difference-quotient truncation error is set
/// by the curvature of the whole objective, not by their own size.
pub const RELATIVE_SCALE_FLOOR: f64 = 1e-3;

/// `∂f/∂x_i ≈ (f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst per-entry relative error; see [`RELATIVE_SCALE_FLOOR`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_SCALE_FLOOR * scale).max(RELATIVE_ERROR_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, |m: f64, e| if e.is_nan() { f64::INFINITY } else { m.max(e) })
}

/// Scalar objective placed on top of a network for checking.
#[derive(Debug, Clone)]
pub enum Probe {
    /// `Σ w_i · out_i`
    Linear(Vec<f64>),
    SoftmaxCrossEntropy(Vec<usize>),
    CosineSa(Tensor<f64>),
}

impl Probe {
    pub fn value(&self, out: &Tensor<f64>) -> Result<f64> {
        Ok(match self {
            Probe::Linear(w) => out.data().iter().zip(w).map(|(a, b)| a * b).sum(),
            Probe::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(out, labels)?.0,
            Probe::CosineSa(target) => cosine_sa_loss(out, target)?.0,
        })
    }

    pub fn gradient(&self, out: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(match self {
            Probe::Linear(w) => Tensor::new(out.shape().to_vec(), w.clone())?,
            Probe::SoftmaxCrossEntropy(labels) => softmax_cross_entropy(out, labels)?.1,
            Probe::CosineSa(target) => cosine_sa_loss(out, target)?.1,
        })
    }
}

/// Worst relative errors of one network check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub input: f64,
    pub params: f64,
    /// Coordinates whose ±ε probes flipped some ReLU and were not compared.
    pub skipped: usize,
    pub compared: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.input.max(self.params)
    }
}

fn relu_pattern(caches: &[Cache<f64>]) -> Vec<bool> {
    caches
        .iter()
        .filter_map(|c| match c {
            Cache::Relu { input } => Some(input.data().iter().map(|&v| v > 0.0)),
            _ => None,
        })
        .flatten()
        .collect()
}

/// Loss of a training forward pass, or NaN when the ReLU on/off pattern
/// differs from `pattern` (the probe crossed a kink).
fn train_loss(net: &Sequential<f64>, input: &Tensor<f64>, probe: &Probe, pattern: &[bool]) -> f64 {
    let mut n = net.clone();
    let (out, caches) = n.forward_train(input).expect("gradcheck forward");
    if relu_pattern(&caches) != pattern {
        return f64::NAN;
    }
    probe.value(&out).expect("gradcheck probe")
}

/// Like [`max_relative_error`] but ignores entries whose numeric value is NaN.
fn compare_smooth(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let (a, n): (Vec<f64>, Vec<f64>) = analytic
        .iter()
        .zip(numeric)
        .filter(|(_, n)| !n.is_nan())
        .map(|(&a, &n)| (a, n))
        .unzip();
    let err = if a.is_empty() { 0.0 } else { max_relative_error(&a, &n) };
    (err, analytic.len() - a.len())
}

/// Compares backpropagated input and parameter gradients of a training-mode
/// forward pass against central differences with step `eps`. ReLU is not
/// differentiable at 0, so coordinates whose probes change any ReLU's
/// on/off state are skipped and counted.
pub fn check_network(net: &Sequential<f64>, input: &Tensor<f64>, probe: &Probe, eps: f64) -> Result<GradCheckReport> {
    let mut work = net.clone();
    let (out, caches) = work.forward_train(input)?;
    let pattern = relu_pattern(&caches);
    let (dx, dparams) = net.backward(&caches, probe.gradient(&out)?, true)?;
    let dx = dx.expect("input gradient requested");

    let numeric_input = central_difference(
        |x| {
            let t = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            train_loss(net, &t, probe, &pattern)
        },
        input.data(),
        eps,
    );
    let (input_err, input_skipped) = compare_smooth(dx.data(), &numeric_input);

    let flat: Vec<f64> = net.params().iter().flat_map(|p| p.iter().copied()).collect();
    let analytic: Vec<f64> = dparams.iter().flatten().copied().collect();
    let numeric_params = central_difference(
        |theta| {
            let mut n = net.clone();
            let mut offset = 0;
            for block in n.params_mut() {
                block.copy_from_slice(&theta[offset..offset + block.len()]);
                offset += block.len();
            }
            train_loss(&n, input, probe, &pattern)
        },
        &flat,
        eps,
    );
    let (params_err, params_skipped) = compare_smooth(&analytic, &numeric_params);
    let total = numeric_input.len() + numeric_params.len();
    let skipped = input_skipped + params_skipped;
    Ok(GradCheckReport {
        input: input_err,
        params: params_err,
        skipped,
        compared: total - skipped,
    })
}

/// Checks a loss function's own gradient with respect to its first argument.
pub fn check_loss(probe: &Probe, at: &Tensor<f64>, eps: f64) -> Result<f64> {
    let analytic = probe.gradient(at)?;
    let numeric = central_difference(
        |x| {
            let t = Tensor::new(at.shape().to_vec(), x.to_vec()).unwrap();
            probe.value(&t).expect("loss probe")
        },
        at.data(),
        eps,
    );
    Ok(max_relative_error(analytic.data(), &numeric))
}
