//! 1D convolutional spectral classifier: corpus pretraining, transfer
//! initialisation, relighting-augmented training and whole-cube mapping.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::cluster::ConfidentSet;
use crate::error::{Error, Result};
use crate::illumination::{augment_batch, relight_in_place, sample_atmosphere, AtmosphereSamplerParams};
use crate::metrics::{confusion_with_classes, precision_recall_f1};
use crate::nn::{container, softmax_cross_entropy, Layer, LayerSpec, Sequential, Sgd, Tensor};
use crate::render;
use crate::rng::{stream, streams};
use crate::spectral::{
    format_list, mean_offset_in_place, Header, HyperspectralCube, LabelRaster, Resampler, Spectrum, WavelengthGrid,
};

/// Default pretrained-network grid: 430–860 nm at 2 nm (216 bands).
pub fn pretrain_grid() -> Arc<WavelengthGrid> {
    Arc::new(WavelengthGrid::linspace(430.0, 860.0, 216).expect("static grid"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    pub kernels: Vec<usize>,
    pub channels: Vec<usize>,
    /// Hidden fully-connected widths; the output layer has `classes` units.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub grid: Arc<WavelengthGrid>,
}

impl Default for CnnSpec {
    fn default() -> Self {
        Self {
            kernels: vec![30, 10, 10],
            channels: vec![16, 16, 16],
            hidden: vec![20, 20],
            classes: 3,
            grid: pretrain_grid(),
        }
    }
}

impl CnnSpec {
    pub fn with_classes(&self, classes: usize) -> Self {
        Self {
            classes,
            ..self.clone()
        }
    }

    pub fn with_grid(&self, grid: Arc<WavelengthGrid>) -> Self {
        Self { grid, ..self.clone() }
    }

    /// Fully-connected widths, output layer included.
    pub fn fc_sizes(&self) -> Vec<usize> {
        let mut v = self.hidden.clone();
        v.push(self.classes);
        v
    }

    /// Sequence length after each convolution.
    pub fn conv_lengths(&self) -> Vec<Option<usize>> {
        let mut len = Some(self.grid.len());
        self.kernels
            .iter()
            .map(|&k| {
                len = len.and_then(|l| (l >= k).then(|| l - k + 1));
                len
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.kernels.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "{} kernels for {} channel counts; need the same non-zero number",
                self.kernels.len(),
                self.channels.len()
            )));
        }
        if self.kernels.contains(&0) || self.channels.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("kernel, channel and hidden sizes must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classifier needs >= 1 class".into()));
        }
        if let Some(i) = self.conv_lengths().iter().position(|l| l.is_none()) {
            return Err(Error::Config(format!(
                "convolution {} has no valid output on a {}-band grid",
                i + 1,
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// conv → batchnorm → ReLU blocks, then dense → batchnorm → ReLU blocks
    /// and a linear output layer.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut out = Vec::new();
        let mut in_ch = 1;
        for (&k, &c) in self.kernels.iter().zip(&self.channels) {
            out.extend([LayerSpec::conv1d(k, in_ch, c), LayerSpec::batch_norm(c), LayerSpec::Relu]);
            in_ch = c;
        }
        let mut width = self.conv_lengths().last().copied().flatten().expect("validated") * in_ch;
        for &h in &self.hidden {
            out.extend([LayerSpec::dense(width, h), LayerSpec::batch_norm(h), LayerSpec::Relu]);
            width = h;
        }
        out.push(LayerSpec::dense(width, self.classes));
        Ok(out)
    }

    fn write_header(&self, s: &mut String) {
        let list = |v: &[usize]| format_list(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        writeln!(s, "kernels = {}", list(&self.kernels)).unwrap();
        writeln!(s, "channels = {}", list(&self.channels)).unwrap();
        writeln!(s, "hidden = {}", list(&self.hidden)).unwrap();
        writeln!(s, "classes = {}", self.classes).unwrap();
        writeln!(s, "bands = {}", self.grid.len()).unwrap();
        writeln!(s, "wavelengths = {}", format_list(self.grid.wavelengths())).unwrap();
    }

    fn from_header(h: &Header) -> Result<Self> {
        let usizes = |key: &str| -> Result<Vec<usize>> {
            let (_, off) = h.required(key)?;
            h.f64_list(key)?
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(h.error(off, format!("`{key}` needs non-negative integers")))
                    }
                })
                .collect()
        };
        let wl = h.f64_list("wavelengths")?;
        if wl.len() != h.usize("bands")? {
            let (_, off) = h.required("wavelengths")?;
            return Err(h.error(off, "wavelength count differs from `bands`"));
        }
        let spec = Self {
            kernels: usizes("kernels")?,
            channels: usizes("channels")?,
            hidden: usizes("hidden")?,
            classes: h.usize("classes")?,
            grid: Arc::new(WavelengthGrid::new(wl)?),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Resampling onto the network grid followed by mean offset.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    resampler: Resampler,
}

impl Preprocessor {
    pub fn new(source: &WavelengthGrid, spec: &CnnSpec) -> Result<Self> {
        Ok(Self {
            resampler: Resampler::new(source, spec.grid.clone())?,
        })
    }

    pub fn bands(&self) -> usize {
        self.resampler.target().len()
    }

    pub fn apply_into(&self, native: &[f32], out: &mut [f32]) {
        self.resampler.apply_into(native, out);
        mean_offset_in_place(out);
    }

    /// Preprocesses pixel-interleaved spectra.
    pub fn apply_rows(&self, native: &[f32], source_bands: usize) -> Vec<f32> {
        let bands = self.bands();
        let rows = native.len() / source_bands.max(1);
        let mut out = vec![0.0f32; rows * bands];
        for (src, dst) in native.chunks_exact(source_bands).zip(out.chunks_exact_mut(bands)) {
            self.apply_into(src, dst);
        }
        out
    }
}

/// Labelled spectra on one grid, pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSpectra {
    pub grid: Arc<WavelengthGrid>,
    pub labels: Vec<usize>,
    pub values: Vec<f32>,
}

impl LabelledSpectra {
    pub fn new(grid: Arc<WavelengthGrid>, labels: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if values.len() != labels.len() * grid.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} spectra of {} bands",
                values.len(),
                labels.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, labels, values })
    }

    pub fn from_confident(set: &ConfidentSet) -> Result<Self> {
        let labels = set.entries.iter().map(|e| e.label).collect();
        let values = set.entries.iter().flat_map(|e| e.spectrum.iter().copied()).collect();
        Self::new(set.grid.clone(), labels, values)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.grid.len()
    }

    pub fn spectrum(&self, i: usize) -> &[f32] {
        &self.values[i * self.bands()..(i + 1) * self.bands()]
    }

    /// One more than the largest label.
    pub fn classes(&self) -> usize {
        self.labels.iter().map(|&l| l + 1).max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            grid: self.grid.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            values: indices.iter().flat_map(|&i| self.spectrum(i).iter().copied()).collect(),
        }
    }

    /// `label,<wavelength>...` header, then one row per spectrum.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("label");
        for w in self.grid.wavelengths() {
            write!(s, ",{w}").unwrap();
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(s, "{}", self.labels[i]).unwrap();
            for v in self.spectrum(i) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |offset: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| parse_err(0, "empty file".into()))?;
        let mut cols = header.trim_end().split(',');
        if cols.next() != Some("label") {
            return Err(parse_err(0, "header must start with `label`".into()));
        }
        let wl = cols
            .map(|c| c.trim().parse::<f64>().map_err(|e| parse_err(0, format!("wavelength `{c}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let grid = Arc::new(WavelengthGrid::new(wl)?);
        offset += header.len();
        let (mut labels, mut values) = (Vec::new(), Vec::new());
        for line in lines {
            let row = line.trim_end();
            if !row.is_empty() {
                let mut cells = row.split(',');
                let label = cells.next().unwrap_or_default();
                labels.push(
                    label
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| parse_err(offset, format!("label `{label}`: {e}")))?,
                );
                let before = values.len();
                for c in cells {
                    values.push(
                        c.trim()
                            .parse::<f32>()
                            .map_err(|e| parse_err(offset, format!("value `{c}`: {e}")))?,
                    );
                }
                if values.len() - before != grid.len() {
                    return Err(parse_err(
                        offset,
                        format!("{} values for {} bands", values.len() - before, grid.len()),
                    ));
                }
            }
            offset += line.len();
        }
        Self::new(grid, labels, values)
    }
}

/// Shape of the synthetic pretraining corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Fraction of samples seen partly or fully in shade, as in airborne
    /// scenes with terrain and building shadows.
    pub shaded_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            classes: 9,
            per_class: 200,
            shaded_fraction: 0.5,
            noise_sigma: 0.003,
            seed: 0,
        }
    }
}

/// Synthetic stand-in for a generic labelled VNIR corpus: each class is a
/// random smooth reflectance curve (a sloped baseline plus a few Gaussian
/// features). Samples vary in brightness and shape, a share of them is
/// shaded under a random skylight tilt, and all carry noise.
pub fn synthetic_corpus(grid: &Arc<WavelengthGrid>, spec: &CorpusSpec) -> Result<LabelledSpectra> {
    let (classes, per_class) = (spec.classes, spec.per_class);
    if classes < 2 || per_class == 0 {
        return Err(Error::Config(format!(
            "corpus needs >= 2 classes and >= 1 sample per class, got {classes} x {per_class}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.shaded_fraction) {
        return Err(Error::Config(format!("shaded_fraction {} outside [0, 1]", spec.shaded_fraction)));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("corpus noise: {e}")))?;
    let mut rng = stream(spec.seed, streams::CORPUS);
    let (lo, hi) = (grid.first(), grid.last());
    let span = (hi - lo).max(1.0);
    let x: Vec<f64> = grid.wavelengths().iter().map(|&w| (w - lo) / span).collect();
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let base = rng.random_range(0.08..0.45);
            let slope = rng.random_range(-0.15..0.25);
            let features: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=4))
                .map(|_| {
                    (
                        rng.random_range(-0.12..0.12),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.03..0.25),
                    )
                })
                .collect();
            x.iter()
                .map(|&t| {
                    let bumps: f64 = features
                        .iter()
                        .map(|&(a, c, w)| a * (-0.5 * ((t - c) / w).powi(2)).exp())
                        .sum();
                    (base + slope * t + bumps).max(0.01)
                })
                .collect()
        })
        .collect();
    let shade = AtmosphereSamplerParams::default();
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut values = Vec::with_capacity(classes * per_class * grid.len());
    for _ in 0..per_class {
        for (c, proto) in prototypes.iter().enumerate() {
            let gain = rng.random_range(0.6..1.4);
            let tilt = rng.random_range(-0.08..0.08);
            let mut sample: Vec<f32> = proto
                .iter()
                .zip(&x)
                .map(|(&p, &t)| (p * gain * (1.0 + tilt * (t - 0.5))) as f32)
                .collect();
            if rng.random_bool(spec.shaded_fraction) {
                let k = sample_atmosphere(&shade, grid, &mut rng).shadow_factor();
                let gamma: f64 = rng.random();
                relight_in_place(&mut sample, gamma, &k);
            }
            for v in &mut sample {
                *v = (*v as f64 + noise.sample(&mut rng)).max(0.0) as f32;
            }
            labels.push(c);
            values.extend(sample);
        }
    }
    LabelledSpectra::new(grid.clone(), labels, values)
}

/// A classifier network and the architecture it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnState {
    pub spec: CnnSpec,
    pub net: Sequential,
}

impl CnnState {
    pub fn fresh(spec: CnnSpec, seed: u64) -> Result<Self> {
        let layers = spec.layers()?;
        let net = Sequential::build(&layers, &mut stream(seed, streams::INIT))?;
        Ok(Self { spec, net })
    }

    /// Logits for preprocessed spectra on the spec grid.
    pub fn logits(&self, input: &[f32], count: usize) -> Result<Vec<f32>> {
        let x = Tensor::new(vec![count, self.spec.grid.len()], input.to_vec())?;
        Ok(self.net.infer(&x)?.into_data())
    }

    pub fn predict(&self, input: &[f32], count: usize) -> Result<Vec<u8>> {
        let logits = self.logits(input, count)?;
        Ok(logits.chunks_exact(self.spec.classes).map(|r| argmax(r) as u8).collect())
    }

    fn sidecar(path: &Path) -> PathBuf {
        PathBuf::from(format!("{}.meta", path.display()))
    }

    /// Weights container at `path`, architecture and grid at `path.meta`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        container::save(&self.net, path)?;
        let mut s = String::new();
        self.spec.write_header(&mut s);
        let meta = Self::sidecar(path);
        fs::write(&meta, s).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let net = container::load(path)?;
        let spec = CnnSpec::from_header(&Header::read(&Self::sidecar(path))?)?;
        if net.specs() != spec.layers()? {
            return Err(Error::State(format!(
                "{}: stored layers do not match the recorded architecture",
                path.display()
            )));
        }
        Ok(Self { spec, net })
    }
}

/// Lowest index among the maxima.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A network trained on a labelled corpus, kept with its grid and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedWeights {
    pub state: CnnState,
}

impl PretrainedWeights {
    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.state.spec.grid
    }

    pub fn corpus_classes(&self) -> usize {
        self.state.spec.classes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.state.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            state: CnnState::load(path)?,
        })
    }
}

/// Which epoch's weights [`train`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Highest validation F1; later epochs win ties.
    BestValidation,
    Last,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" | "best-validation" => Ok(Selection::BestValidation),
            "last" => Ok(Selection::Last),
            other => Err(Error::Config(format!("unknown selection `{other}`; use best or last"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    /// Original spectra per minibatch, before augmentation.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub augment: bool,
    pub n_variants: usize,
    pub sampler: AtmosphereSamplerParams,
    pub selection: Selection,
    /// Keep batch-normalisation statistics fixed while training.
    pub freeze_batchnorm: bool,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 60,
            learning_rate: 0.01,
            momentum: 0.9,
            augment: false,
            n_variants: 9,
            sampler: AtmosphereSamplerParams::default(),
            selection: Selection::BestValidation,
            freeze_batchnorm: false,
            seed: 0,
        }
    }
}

impl CnnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.augment {
            self.sampler.validate()?;
        }
        Sgd::<f32>::new(self.learning_rate, self.momentum)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_f1,test_f1,selected\n");
        for r in &self.records {
            let selected = u8::from(self.selected_epoch == Some(r.epoch));
            writeln!(
                s,
                "{},{},{},{},{selected}",
                r.epoch,
                r.loss,
                opt_cell(r.val_f1),
                opt_cell(r.test_f1)
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut selected_epoch = None;
        let mut offset = 0u64;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let row = line.trim_end();
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                offset,
                message: m,
            };
            if i == 0 {
                if row != "epoch,loss,val_f1,test_f1,selected" {
                    return Err(err(format!("unexpected header `{row}`")));
                }
            } else if !row.is_empty() {
                let cells: Vec<&str> = row.split(',').collect();
                if cells.len() != 5 {
                    return Err(err(format!("{} cells, expected 5", cells.len())));
                }
                let f = |c: &str| -> Result<Option<f64>> {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse().map(Some).map_err(|e| err(format!("`{c}`: {e}")))
                    }
                };
                let epoch = cells[0].parse().map_err(|e| err(format!("epoch `{}`: {e}", cells[0])))?;
                if records.last().is_some_and(|r: &EpochRecord| r.epoch >= epoch) {
                    return Err(err(format!("epoch {epoch} is not increasing")));
                }
                records.push(EpochRecord {
                    epoch,
                    loss: f(cells[1])?.ok_or_else(|| err("missing loss".into()))?,
                    val_f1: f(cells[2])?,
                    test_f1: f(cells[3])?,
                });
                match cells[4] {
                    "0" => {}
                    "1" if selected_epoch.is_none() => selected_epoch = Some(epoch),
                    c => return Err(err(format!("`selected` must be 0 or 1 once, found `{c}`"))),
                }
            }
            offset += line.len() as u64;
        }
        Ok(Self { records, selected_epoch })
    }

    pub fn test_curve(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.test_f1).collect()
    }
}

/// One minibatch: the spectra on their native grid after any relighting
/// (originals first, each followed by its variants), their labels, and the
/// resampled, mean-offset network input.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub native: Vec<Spectrum>,
    pub labels: Vec<usize>,
    pub input: Vec<f32>,
}

/// Shuffles `train` into minibatches for one epoch, expanding each with
/// relit variants when augmenting. Relighting happens on the native grid;
/// resampling and mean offset follow.
pub fn epoch_batches(
    train: &LabelledSpectra,
    pre: &Preprocessor,
    config: &CnnTrainConfig,
    shuffle: &mut ChaCha8Rng,
    augment: &mut ChaCha8Rng,
) -> Result<Vec<Minibatch>> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(shuffle);
    let bands = pre.bands();
    order
        .chunks(config.batch_size)
        .map(|chunk| {
            let originals = chunk
                .iter()
                .map(|&i| Spectrum::new(train.spectrum(i).to_vec(), train.grid.clone()))
                .collect::<Result<Vec<_>>>()?;
            let (native, repeat) = if config.augment {
                (augment_batch(&originals, &config.sampler, config.n_variants, augment)?, 1 + config.n_variants)
            } else {
                (originals, 1)
            };
            let labels: Vec<usize> = chunk
                .iter()
                .flat_map(|&i| std::iter::repeat_n(train.labels[i], repeat))
                .collect();
            let mut input = vec![0.0f32; native.len() * bands];
            for (s, out) in native.iter().zip(input.chunks_exact_mut(bands)) {
                pre.apply_into(s.values(), out);
            }
            Ok(Minibatch { native, labels, input })
        })
        .collect()
}

const EVAL_CHUNK: usize = 2048;

fn predict_rows(net: &Sequential, input: &[f32], bands: usize, classes: usize) -> Result<Vec<u8>> {
    let rows: Vec<&[f32]> = input.chunks(EVAL_CHUNK * bands).collect();
    let parts = rows
        .par_iter()
        .map(|chunk| {
            let x = Tensor::new(vec![chunk.len() / bands, bands], chunk.to_vec())?;
            let logits = net.infer(&x)?.into_data();
            Ok(logits.chunks_exact(classes).map(|r| argmax(r) as u8).collect::<Vec<u8>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Macro F1 of a network on preprocessed spectra.
fn macro_f1(net: &Sequential, input: &[f32], labels: &[usize], bands: usize, classes: usize) -> Result<f64> {
    let pred = predict_rows(net, input, bands, classes)?;
    let truth: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    Ok(precision_recall_f1(&confusion_with_classes(&pred, &truth, classes)?).macro_f1)
}

struct Prepared {
    input: Vec<f32>,
    labels: Vec<usize>,
}

fn prepare(set: &LabelledSpectra, pre: &Preprocessor, classes: usize, what: &str) -> Result<Prepared> {
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("{what} label {bad} out of range for {classes} classes")));
    }
    Ok(Prepared {
        input: pre.apply_rows(&set.values, set.bands()),
        labels: set.labels.clone(),
    })
}

/// Minibatch SGD on softmax cross-entropy. Validation and optional test
/// spectra are never augmented; their macro F1 is logged every epoch. Test
/// labels must already be in the network's label space.
pub fn train(
    init: &CnnState,
    train_set: &LabelledSpectra,
    val: &LabelledSpectra,
    test: Option<&LabelledSpectra>,
    config: &CnnTrainConfig,
) -> Result<(CnnState, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    fit(init, train_set, Some(val), test, config, "cnn training")
}

fn fit(
    init: &CnnState,
    train_set: &LabelledSpectra,
    val: Option<&LabelledSpectra>,
    test: Option<&LabelledSpectra>,
    config: &CnnTrainConfig,
    stage: &str,
) -> Result<(CnnState, TrainLog)> {
    let spec = &init.spec;
    let classes = spec.classes;
    let bands = spec.grid.len();
    let pre = Preprocessor::new(&train_set.grid, spec)?;
    if let Some(&bad) = train_set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("training label {bad} out of range for {classes} classes")));
    }
    let val = val
        .map(|v| Ok::<_, Error>(prepare(v, &Preprocessor::new(&v.grid, spec)?, classes, "validation")?))
        .transpose()?;
    let test = test
        .map(|t| Ok::<_, Error>(prepare(t, &Preprocessor::new(&t.grid, spec)?, classes, "test")?))
        .transpose()?;

    let mut net = init.net.clone();
    if config.freeze_batchnorm {
        net.set_batchnorm_frozen(true);
    }
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let mut shuffle = stream(config.seed, streams::SHUFFLE);
    let mut augment = stream(config.seed, streams::AUGMENT);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Sequential)> = None;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in epoch_batches(train_set, &pre, config, &mut shuffle, &mut augment)? {
            let n = batch.labels.len();
            let x = Tensor::new(vec![n, bands], batch.input)?;
            let (out, caches) = net.forward_train(&x)?;
            let (loss, grad) = softmax_cross_entropy(&out, &batch.labels)?;
            let (_, grads) = net.backward(&caches, grad, false)?;
            opt.step(net.params_mut(), &grads)?;
            total += loss * n as f64;
            seen += n;
        }
        let loss = total / seen.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: stage.into(),
                epoch,
            });
        }
        let val_f1 = val
            .as_ref()
            .map(|v| macro_f1(&net, &v.input, &v.labels, bands, classes))
            .transpose()?;
        let test_f1 = test
            .as_ref()
            .map(|t| macro_f1(&net, &t.input, &t.labels, bands, classes))
            .transpose()?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            val_f1,
            test_f1,
        });
        if let (Selection::BestValidation, Some(f1)) = (config.selection, val_f1) {
            if best.as_ref().is_none_or(|(b, _)| f1 >= *b) {
                best = Some((f1, net.clone()));
                log.selected_epoch = Some(epoch);
            }
        }
    }
    let mut chosen = match best {
        Some((_, n)) => n,
        None => {
            log.selected_epoch = (config.epochs > 0).then_some(config.epochs);
            net
        }
    };
    chosen.set_batchnorm_frozen(false);
    Ok((
        CnnState {
            spec: spec.clone(),
            net: chosen,
        },
        log,
    ))
}

/// Trains `spec`'s architecture with a head sized to the corpus classes.
pub fn pretrain_on_corpus(corpus: &LabelledSpectra, spec: &CnnSpec, config: &CnnTrainConfig) -> Result<(PretrainedWeights, TrainLog)> {
    config.validate()?;
    let classes = corpus.classes();
    let mut present = vec![false; classes];
    corpus.labels.iter().for_each(|&l| present[l] = true);
    if let Some(gap) = present.iter().position(|&p| !p) {
        return Err(Error::Label(format!(
            "corpus labels must cover 0..{classes}; class {gap} has no spectra"
        )));
    }
    if classes < 2 {
        return Err(Error::Label("corpus needs at least two classes".into()));
    }
    let init = CnnState::fresh(spec.with_classes(classes), config.seed)?;
    let config = CnnTrainConfig {
        selection: Selection::Last,
        ..config.clone()
    };
    let (state, log) = fit(&init, corpus, None, None, &config, "corpus pretraining")?;
    Ok((PretrainedWeights { state }, log))
}

/// Copies every layer of `pretrained` except the output layer, which is
/// replaced by a freshly initialised `n_classes`-wide layer.
pub fn transfer_init(pretrained: &PretrainedWeights, n_classes: usize, seed: u64) -> Result<CnnState> {
    let source = &pretrained.state;
    let expected = source
        .spec
        .layers()
        .map_err(|e| Error::Transfer(format!("pretrained architecture is invalid: {e}")))?;
    if source.net.specs() != expected {
        return Err(Error::Transfer(
            "pretrained weights do not match their recorded architecture".into(),
        ));
    }
    let spec = source.spec.with_classes(n_classes);
    let head = spec.layers()?.pop().expect("non-empty architecture");
    let mut layers = source.net.layers().to_vec();
    let last = layers.len() - 1;
    if !matches!(layers[last], Layer::Dense(_)) {
        return Err(Error::Transfer("pretrained network does not end in a dense layer".into()));
    }
    layers[last] = Layer::build(head, &mut stream(seed, streams::INIT))?;
    Ok(CnnState {
        spec,
        net: Sequential::new(layers),
    })
}

/// Per-pixel class and class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ThematicMap {
    pub labels: LabelRaster,
    /// Softmax scores, one band per class.
    pub scores: HyperspectralCube,
}

const CLASSIFY_CHUNK: usize = 2048;

/// Classifies every pixel of `cube` (on any grid covering the network's).
pub fn classify_cube(state: &CnnState, cube: &HyperspectralCube) -> Result<ThematicMap> {
    let pre = Preprocessor::new(cube.grid(), &state.spec)?;
    let n = cube.pixel_count();
    let (src_bands, bands, classes) = (cube.bands(), pre.bands(), state.spec.classes);
    let starts: Vec<usize> = (0..n).step_by(CLASSIFY_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let count = CLASSIFY_CHUNK.min(n - start);
            let mut native = vec![0.0f32; count * src_bands];
            cube.gather_pixels(start, count, &mut native);
            let input = pre.apply_rows(&native, src_bands);
            let mut logits = state.logits(&input, count)?;
            for row in logits.chunks_exact_mut(classes) {
                softmax_in_place(row);
            }
            debug_assert_eq!(input.len(), count * bands);
            Ok(logits)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0f32; n * classes];
    let mut p = 0;
    for part in &parts {
        for row in part.chunks_exact(classes) {
            labels.push(argmax(row) as u8);
            for (c, &v) in row.iter().enumerate() {
                data[c * n + p] = v;
            }
            p += 1;
        }
    }
    Ok(ThematicMap {
        labels: LabelRaster::new(cube.height(), cube.width(), classes, labels)?,
        scores: HyperspectralCube::new(cube.height(), cube.width(), Arc::new(WavelengthGrid::index(classes)?), data)?,
    })
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    for v in row.iter_mut() {
        *v = ((*v as f64 - max).exp() / sum) as f32;
    }
}

/// Class colours: green, purple, pink, then further distinct hues.
pub const CLASS_COLOURS: [[u8; 3]; 8] = [
    [40, 170, 60],
    [120, 60, 170],
    [240, 120, 190],
    [230, 160, 30],
    [40, 120, 220],
    [200, 40, 40],
    [40, 200, 200],
    [150, 150, 150],
];

/// Writes a label raster in class colours; unlabelled pixels are black.
pub fn render_labels(labels: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    let rgb: Vec<u8> = labels
        .labels()
        .iter()
        .flat_map(|&l| CLASS_COLOURS.get(l as usize).copied().unwrap_or([0, 0, 0]))
        .collect();
    render::save_rgb(rgb, labels.height(), labels.width(), path)
}
