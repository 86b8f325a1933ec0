use rand::Rng;

use super::layer::{Cache, Layer, LayerSpec, Mode};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T = f32> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn build(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&s| Layer::build(s, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<Layer<T>> {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Output shape for an input shape, validating every layer on the way.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Training-mode forward pass returning one cache per layer.
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(&x, Mode::Train)?;
            caches.push(cache.expect("training forward returns a cache"));
            x = y;
        }
        Ok((x, caches))
    }

    /// Backpropagates `grad` (d loss / d output). Returns the input gradient
    /// when requested and the parameter gradients flattened in
    /// [`Sequential::params_mut`] order.
    pub fn backward(
        &self,
        caches: &[Cache<T>],
        grad: Tensor<T>,
        want_input_grad: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Vec<T>>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut per_layer: Vec<Vec<Vec<T>>> = Vec::with_capacity(self.layers.len());
        let mut g = Some(grad);
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let upstream = g.take().expect("gradient flows to every layer");
            let need = i > 0 || want_input_grad;
            let (dx, grads) = layer.backward(&upstream, cache, need)?;
            per_layer.push(grads);
            g = dx;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn set_batchnorm_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                b.frozen = frozen;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        use super::layer::{BatchNorm, Conv1d, Dense};
        let c = |v: &[T]| v.iter().map(|&x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(Dense {
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: c(&d.weight),
                    bias: c(&d.bias),
                }),
                Layer::Conv1d(k) => Layer::Conv1d(Conv1d {
                    kernel: k.kernel,
                    in_channels: k.in_channels,
                    out_channels: k.out_channels,
                    stride: k.stride,
                    weight: c(&k.weight),
                    bias: c(&k.bias),
                }),
                Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                    channels: b.channels,
                    epsilon: b.epsilon,
                    momentum: b.momentum,
                    gamma: c(&b.gamma),
                    beta: c(&b.beta),
                    running_mean: c(&b.running_mean),
                    running_var: c(&b.running_var),
                    frozen: b.frozen,
                }),
                Layer::Relu => Layer::Relu,
            })
            .collect();
        Sequential { layers }
    }
}
