//! Relit spectral-angle stacked autoencoder.
//!
//! Layer-wise pretraining on the cosine spectral-angle loss, end-to-end
//! fine-tuning that maps shadow-relit spectra back to their sunlit originals,
//! and encoding of whole cubes into the code space.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::illumination::{relight_in_place, AtmosphereSampler, AtmosphereSamplerParams};
use crate::nn::{container, cosine_sa_loss, Layer, LayerSpec, Sequential, Sgd, Tensor};
use crate::render;
use crate::rng::{stream, streams};
use crate::spectral::{format_list, Header, HyperspectralCube, WavelengthGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderSpec {
    pub input_bands: usize,
    /// Dense widths from the first hidden layer down to the code.
    pub encoder_sizes: Vec<usize>,
    pub bias: bool,
    /// Scale every input spectrum to unit L2 norm before the first layer.
    pub normalise_input: bool,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            input_bands: 220,
            encoder_sizes: vec![100, 50, 30],
            bias: true,
            normalise_input: true,
        }
    }
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_bands == 0 || self.encoder_sizes.is_empty() || self.encoder_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "autoencoder needs >= 1 input band and non-empty, non-zero encoder sizes (got {} bands, {:?})",
                self.input_bands, self.encoder_sizes
            )));
        }
        Ok(())
    }

    pub fn code_dim(&self) -> usize {
        *self.encoder_sizes.last().expect("validated spec")
    }

    /// Input width followed by every encoder width.
    fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_bands)
            .chain(self.encoder_sizes.iter().copied())
            .collect()
    }

    /// Mirror of the encoder path ending at `input_bands`.
    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut w = self.widths();
        w.pop();
        w.reverse();
        w
    }

    fn dense(&self, inputs: usize, outputs: usize) -> LayerSpec {
        LayerSpec::Dense {
            inputs,
            outputs,
            bias: self.bias,
        }
    }

    /// Dense layers with ReLU between them; the code layer is linear.
    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let w = self.widths();
        let depth = self.encoder_sizes.len();
        let mut out = Vec::new();
        for i in 0..depth {
            out.push(self.dense(w[i], w[i + 1]));
            if i + 1 < depth {
                out.push(LayerSpec::Relu);
            }
        }
        out
    }

    /// Dense layers with ReLU between them; the reconstruction is linear.
    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let w = self.widths();
        let mut out = Vec::new();
        for i in (0..self.encoder_sizes.len()).rev() {
            out.push(self.dense(w[i + 1], w[i]));
            if i > 0 {
                out.push(LayerSpec::Relu);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainConfig {
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    /// Random subset of pixels used for pretraining; `None` uses every pixel.
    pub pretrain_max_samples: Option<usize>,
    pub finetune_samples: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub atmospheres_per_sample: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Fine-tuning stops once the epoch-mean loss has not improved by more
    /// than `early_stop_min_delta` for this many epochs.
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// Pixels with a smaller L2 norm are never sampled.
    pub norm_threshold: f64,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 1000,
            pretrain_batch: 256,
            pretrain_max_samples: None,
            finetune_samples: 5000,
            finetune_epochs: 500,
            finetune_batch: 50,
            atmospheres_per_sample: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            early_stop_patience: 20,
            early_stop_min_delta: 1e-5,
            norm_threshold: 1e-6,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pretrain_batch", self.pretrain_batch),
            ("finetune_samples", self.finetune_samples),
            ("finetune_batch", self.finetune_batch),
            ("atmospheres_per_sample", self.atmospheres_per_sample),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.pretrain_max_samples == Some(0) {
            return Err(Error::Config("pretrain_max_samples must be >= 1".into()));
        }
        Sgd::<f32>::new(self.learning_rate, self.momentum)?;
        Ok(())
    }
}

/// Provenance carried next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    /// Epochs completed per pretrained layer.
    pub pretrain_epochs: Vec<usize>,
    pub finetune_epochs: usize,
    pub sampler: Option<AtmosphereSamplerParams>,
    /// Epoch-mean loss per pretrained layer.
    pub pretrain_loss: Vec<Vec<f64>>,
    pub finetune_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub spec: AutoencoderSpec,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub meta: TrainingMeta,
}

impl EncoderState {
    /// Freshly initialised weights.
    pub fn new(spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, streams::INIT);
        let encoder = Sequential::build(&spec.encoder_layers(), &mut rng)?;
        let decoder = Sequential::build(&spec.decoder_layers(), &mut rng)?;
        Ok(Self {
            spec,
            encoder,
            decoder,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    pub fn code_dim(&self) -> usize {
        self.spec.code_dim()
    }

    /// Encoder followed by decoder as one network.
    pub fn autoencoder(&self) -> Sequential {
        let mut layers = self.encoder.layers().to_vec();
        layers.extend_from_slice(self.decoder.layers());
        Sequential::new(layers)
    }

    fn set_autoencoder(&mut self, net: Sequential) {
        let split = self.encoder.layers().len();
        let mut layers = net.layers().to_vec();
        let decoder = layers.split_off(split);
        self.encoder = Sequential::new(layers);
        self.decoder = Sequential::new(decoder);
    }

    fn input(&self, pixels: &[f32], count: usize) -> Result<Tensor> {
        let mut data = pixels.to_vec();
        if self.spec.normalise_input {
            normalise_rows(&mut data, self.spec.input_bands);
        }
        Tensor::new(vec![count, self.spec.input_bands], data)
    }

    /// Codes for `count` pixel-interleaved spectra.
    pub fn encode_pixels(&self, pixels: &[f32], count: usize) -> Result<Vec<f32>> {
        Ok(self.encoder.infer(&self.input(pixels, count)?)?.into_data())
    }

    pub fn reconstruct_pixels(&self, pixels: &[f32], count: usize) -> Result<Vec<f32>> {
        Ok(self.autoencoder().infer(&self.input(pixels, count)?)?.into_data())
    }

    fn sidecar(path: &Path) -> PathBuf {
        PathBuf::from(format!("{}.meta", path.display()))
    }

    /// Writes the weights container at `path` and a text sidecar at `path.meta`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        container::save(&self.autoencoder(), path)?;
        let m = &self.meta;
        let mut s = String::new();
        let list = |v: &[usize]| format_list(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        writeln!(s, "input_bands = {}", self.spec.input_bands).unwrap();
        writeln!(s, "encoder_sizes = {}", list(&self.spec.encoder_sizes)).unwrap();
        writeln!(s, "bias = {}", self.spec.bias).unwrap();
        writeln!(s, "normalise_input = {}", self.spec.normalise_input).unwrap();
        writeln!(s, "seed = {}", m.seed).unwrap();
        writeln!(s, "pretrain_epochs = {}", list(&m.pretrain_epochs)).unwrap();
        writeln!(s, "finetune_epochs = {}", m.finetune_epochs).unwrap();
        if let Some(p) = &m.sampler {
            writeln!(s, "sampler.blue_bias = {}", format_list(&[p.blue_bias.0, p.blue_bias.1])).unwrap();
            writeln!(
                s,
                "sampler.sky_to_sun_ratio = {}",
                format_list(&[p.sky_to_sun_ratio.0, p.sky_to_sun_ratio.1])
            )
            .unwrap();
            writeln!(s, "sampler.smoothness = {}", p.smoothness).unwrap();
            writeln!(s, "sampler.reference_nm = {}", p.reference_nm).unwrap();
            writeln!(s, "sampler.seed = {}", p.seed).unwrap();
        }
        for (i, losses) in m.pretrain_loss.iter().enumerate() {
            writeln!(s, "pretrain_loss.{i} = {}", format_list(losses)).unwrap();
        }
        writeln!(s, "finetune_loss = {}", format_list(&m.finetune_loss)).unwrap();
        let meta_path = Self::sidecar(path);
        fs::write(&meta_path, s).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = container::load(path)?;
        let h = Header::read(&Self::sidecar(path))?;
        let usizes = |key: &str| -> Result<Vec<usize>> {
            Ok(h.f64_list(key)?.into_iter().map(|v| v as usize).collect())
        };
        let pair = |key: &str| -> Result<(f64, f64)> {
            match h.f64_list(key)?.as_slice() {
                &[a, b] => Ok((a, b)),
                _ => Err(h.error(h.required(key)?.1, format!("`{key}` needs two values"))),
            }
        };
        let spec = AutoencoderSpec {
            input_bands: h.usize("input_bands")?,
            encoder_sizes: usizes("encoder_sizes")?,
            bias: h.value("bias")?,
            normalise_input: h.value("normalise_input")?,
        };
        spec.validate()?;
        let sampler = if h.get("sampler.seed").is_some() {
            Some(AtmosphereSamplerParams {
                blue_bias: pair("sampler.blue_bias")?,
                sky_to_sun_ratio: pair("sampler.sky_to_sun_ratio")?,
                smoothness: h.usize("sampler.smoothness")?,
                reference_nm: h.value("sampler.reference_nm")?,
                seed: h.value("sampler.seed")?,
            })
        } else {
            None
        };
        let mut pretrain_loss = Vec::new();
        while h.get(&format!("pretrain_loss.{}", pretrain_loss.len())).is_some() {
            pretrain_loss.push(h.f64_list(&format!("pretrain_loss.{}", pretrain_loss.len()))?);
        }
        let meta = TrainingMeta {
            seed: h.value("seed")?,
            pretrain_epochs: usizes("pretrain_epochs")?,
            finetune_epochs: h.usize("finetune_epochs")?,
            sampler,
            pretrain_loss,
            finetune_loss: h.f64_list("finetune_loss")?,
        };
        let expected: Vec<LayerSpec> = spec
            .encoder_layers()
            .into_iter()
            .chain(spec.decoder_layers())
            .collect();
        if net.specs() != expected {
            return Err(Error::State(format!(
                "{}: stored layers do not match the recorded autoencoder shape",
                path.display()
            )));
        }
        let mut state = EncoderState::new(spec, meta.seed)?;
        state.set_autoencoder(net);
        state.meta = meta;
        Ok(state)
    }
}

fn check_bands(spec: &AutoencoderSpec, cube: &HyperspectralCube) -> Result<()> {
    if cube.bands() != spec.input_bands {
        return Err(Error::Dimension(format!(
            "cube has {} bands; the autoencoder expects {}",
            cube.bands(),
            spec.input_bands
        )));
    }
    Ok(())
}

fn row_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scales each `width`-long row to unit L2 norm; all-zero rows stay zero.
pub fn normalise_rows(data: &mut [f32], width: usize) {
    for row in data.chunks_exact_mut(width) {
        let n = row_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / n) as f32);
        }
    }
}

/// Pixel indices with norm above `threshold`, optionally reduced to a
/// seeded random subset (returned in ascending order).
fn usable_pixels(cube: &HyperspectralCube, threshold: f64, limit: Option<usize>, seed: u64) -> Vec<usize> {
    let n = cube.pixel_count();
    let mut sq = vec![0.0f64; n];
    for b in 0..cube.bands() {
        for (acc, &v) in sq.iter_mut().zip(cube.band(b)) {
            *acc += v as f64 * v as f64;
        }
    }
    let mut idx: Vec<usize> = (0..n).filter(|&i| sq[i].sqrt() > threshold).collect();
    if let Some(m) = limit {
        if m < idx.len() {
            let mut rng = stream(seed, streams::SUBSET);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), m)
                .into_iter()
                .map(|j| idx[j])
                .collect();
            picked.sort_unstable();
            idx = picked;
        }
    }
    idx
}

fn gather(cube: &HyperspectralCube, indices: &[usize]) -> Vec<f32> {
    let bands = cube.bands();
    let mut out = vec![0.0f32; indices.len() * bands];
    for b in 0..bands {
        let band = cube.band(b);
        for (row, &p) in out.chunks_exact_mut(bands).zip(indices) {
            row[b] = band[p];
        }
    }
    out
}

fn sgd_step(net: &mut Sequential, opt: &mut Sgd, input: &Tensor, target: &Tensor) -> Result<f64> {
    let (out, caches) = net.forward_train(input)?;
    let (loss, grad) = cosine_sa_loss(&out, target)?;
    let (_, grads) = net.backward(&caches, grad, false)?;
    opt.step(net.params_mut(), &grads)?;
    Ok(loss)
}

fn gather_rows(data: &[f32], width: usize, rows: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&data[r * width..(r + 1) * width]);
    }
    out
}

/// Greedy layer-wise pretraining. Each encoder layer is trained with its
/// decoder counterpart as a shallow autoencoder reconstructing the previous
/// layer's (frozen) activations under the cosine spectral-angle loss.
pub fn pretrain_layerwise(
    cube: &HyperspectralCube,
    spec: &AutoencoderSpec,
    config: &SaeTrainConfig,
) -> Result<EncoderState> {
    spec.validate()?;
    config.validate()?;
    check_bands(spec, cube)?;
    let mut state = EncoderState::new(spec.clone(), config.seed)?;
    let pixels = usable_pixels(cube, config.norm_threshold, config.pretrain_max_samples, config.seed);
    if pixels.is_empty() {
        return Err(Error::Input("no pixel spectrum has a usable norm".into()));
    }
    let widths = spec.widths();
    let depth = spec.encoder_sizes.len();
    let mut level = gather(cube, &pixels);
    if spec.normalise_input {
        normalise_rows(&mut level, spec.input_bands);
    }
    let mut shuffle = stream(config.seed, streams::SHUFFLE);
    for i in 0..depth {
        let (w_in, w_out) = (widths[i], widths[i + 1]);
        let hidden = i + 1 < depth;
        let enc_pos = 2 * i;
        let dec_pos = 2 * (depth - 1 - i);
        let mut pair_layers = vec![state.encoder.layers()[enc_pos].clone()];
        if hidden {
            pair_layers.push(Layer::Relu);
        }
        pair_layers.push(state.decoder.layers()[dec_pos].clone());
        let mut pair = Sequential::new(pair_layers);
        let mut opt = Sgd::new(config.learning_rate, config.momentum)?;

        let rows: Vec<usize> = (0..level.len() / w_in)
            .filter(|&r| row_norm(&level[r * w_in..(r + 1) * w_in]) > config.norm_threshold)
            .collect();
        let mut losses = Vec::with_capacity(config.pretrain_epochs);
        let mut order = rows.clone();
        for epoch in 0..config.pretrain_epochs {
            order.shuffle(&mut shuffle);
            let mut total = 0.0;
            for batch in order.chunks(config.pretrain_batch) {
                let x = Tensor::new(vec![batch.len(), w_in], gather_rows(&level, w_in, batch))?;
                let loss = sgd_step(&mut pair, &mut opt, &x, &x)?;
                total += loss * batch.len() as f64;
            }
            let mean = total / order.len().max(1) as f64;
            if !mean.is_finite() {
                return Err(Error::Divergence {
                    stage: format!("pretraining layer {}", i + 1),
                    epoch: epoch + 1,
                });
            }
            losses.push(mean);
        }
        let trained = pair.layers();
        state.encoder.layers_mut()[enc_pos] = trained[0].clone();
        state.decoder.layers_mut()[dec_pos] = trained[trained.len() - 1].clone();
        state.meta.pretrain_epochs.push(config.pretrain_epochs);
        state.meta.pretrain_loss.push(losses);

        if hidden {
            let step = Sequential::new(vec![trained[0].clone(), Layer::Relu]);
            let n = level.len() / w_in;
            level = step.infer(&Tensor::new(vec![n, w_in], level)?)?.into_data();
            debug_assert_eq!(level.len(), n * w_out);
        }
    }
    Ok(state)
}

/// End-to-end fine-tuning on `finetune_samples` spectra drawn from `cube`.
///
/// With a sampler, every sample is relit into full shadow (`gamma = 0`)
/// under a freshly drawn atmosphere each epoch and the network learns to
/// reconstruct the original; without one the input is the spectrum itself.
/// Atmospheres come from the sampler's own seed, sample choice and batch
/// order from `config.seed`.
pub fn finetune(
    state: &EncoderState,
    cube: &HyperspectralCube,
    sampler: Option<&AtmosphereSamplerParams>,
    config: &SaeTrainConfig,
) -> Result<EncoderState> {
    config.validate()?;
    check_bands(&state.spec, cube)?;
    let mut atmospheres = sampler
        .map(|p| AtmosphereSampler::new(p.clone(), cube.grid().clone()))
        .transpose()?;
    let mut out = state.clone();
    out.meta.sampler = sampler.cloned();
    if config.finetune_epochs == 0 {
        return Ok(out);
    }
    let pixels = usable_pixels(cube, config.norm_threshold, Some(config.finetune_samples), config.seed);
    if pixels.is_empty() {
        return Err(Error::Input("no pixel spectrum has a usable norm".into()));
    }
    let bands = cube.bands();
    let spectra = gather(cube, &pixels);
    let copies = if atmospheres.is_some() { config.atmospheres_per_sample } else { 1 };
    let mut net = state.autoencoder();
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut shuffle = stream(config.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..pixels.len()).collect();
    let (mut best, mut stale) = (f64::INFINITY, 0usize);
    let mut losses = Vec::new();
    for epoch in 0..config.finetune_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(config.finetune_batch) {
            let rows = batch.len() * copies;
            let mut input = Vec::with_capacity(rows * bands);
            let mut target = Vec::with_capacity(rows * bands);
            for &s in batch {
                let original = &spectra[s * bands..(s + 1) * bands];
                for _ in 0..copies {
                    let start = input.len();
                    input.extend_from_slice(original);
                    if let Some(a) = atmospheres.as_mut() {
                        relight_in_place(&mut input[start..], 0.0, &a.sample_shadow_factor());
                    }
                    if state.spec.normalise_input {
                        normalise_rows(&mut input[start..], bands);
                    }
                    target.extend_from_slice(original);
                }
            }
            let x = Tensor::new(vec![rows, bands], input)?;
            let y = Tensor::new(vec![rows, bands], target)?;
            total += sgd_step(&mut net, &mut opt, &x, &y)? * rows as f64;
        }
        let mean = total / (order.len() * copies) as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence {
                stage: "fine-tuning".into(),
                epoch: epoch + 1,
            });
        }
        losses.push(mean);
        if mean < best - config.early_stop_min_delta {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    out.set_autoencoder(net);
    out.meta.finetune_epochs += losses.len();
    out.meta.finetune_loss.extend(losses);
    Ok(out)
}

const ENCODE_CHUNK: usize = 4096;

/// Per-pixel codes as a cube whose bands are the code dimensions (on an
/// index grid `1..=code_dim`).
pub fn encode(state: &EncoderState, cube: &HyperspectralCube) -> Result<HyperspectralCube> {
    check_bands(&state.spec, cube)?;
    let n = cube.pixel_count();
    let bands = cube.bands();
    let dim = state.code_dim();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(ENCODE_CHUNK)
        .map(|start| (start, ENCODE_CHUNK.min(n - start)))
        .collect();
    let codes: Vec<Vec<f32>> = chunks
        .par_iter()
        .map(|&(start, count)| {
            let mut buf = vec![0.0f32; count * bands];
            cube.gather_pixels(start, count, &mut buf);
            state.encode_pixels(&buf, count)
        })
        .collect::<Result<_>>()?;
    let mut data = vec![0.0f32; n * dim];
    for (&(start, count), code) in chunks.iter().zip(&codes) {
        for (j, row) in code.chunks_exact(dim).enumerate() {
            for (d, &v) in row.iter().enumerate() {
                data[d * n + start + j] = v;
            }
        }
        debug_assert_eq!(code.len(), count * dim);
    }
    HyperspectralCube::new(
        cube.height(),
        cube.width(),
        Arc::new(WavelengthGrid::index(dim)?),
        data,
    )
}

/// Writes one code dimension as a min-max normalised grayscale image.
pub fn render_feature(features: &HyperspectralCube, index: usize, path: impl AsRef<Path>) -> Result<()> {
    if index >= features.bands() {
        return Err(Error::Input(format!(
            "feature index {index} out of range for {} features",
            features.bands()
        )));
    }
    render::save_gray(
        render::normalise_to_u8(features.band(index)),
        features.height(),
        features.width(),
        path,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let s = AutoencoderSpec::default();
        assert_eq!(s.code_dim(), 30);
        assert_eq!(s.decoder_sizes(), vec![50, 100, 220]);
        let dense = |v: Vec<LayerSpec>| -> Vec<(usize, usize)> {
            v.into_iter()
                .filter_map(|l| match l {
                    LayerSpec::Dense { inputs, outputs, .. } => Some((inputs, outputs)),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(dense(s.encoder_layers()), vec![(220, 100), (100, 50), (50, 30)]);
        assert_eq!(dense(s.decoder_layers()), vec![(30, 50), (50, 100), (100, 220)]);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let spec = AutoencoderSpec {
            encoder_sizes: vec![],
            ..AutoencoderSpec::default()
        };
        assert!(spec.validate().is_err());
        let c = SaeTrainConfig {
            finetune_batch: 0,
            ..SaeTrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
