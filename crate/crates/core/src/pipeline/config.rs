//! The single `key = value` run configuration.
//!
//! Keys are grouped by stage prefix (`synth.`, `sae.`, `sampler.`,
//! `cluster.`, `extract.`, `corpus.`, `pretrain.`, `cnn.`, `ablation.`,
//! `eval.`, `classify.`). Lists use braces: `sae.encoder_sizes = {100, 50, 30}`.
//! Unknown keys are rejected. [`PipelineConfig::to_text`] prints every
//! key with its resolved value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cluster::KMeansConfig;
use crate::cnn::{CnnSpec, CnnTrainConfig, CorpusSpec, Selection};
use crate::error::{Error, Result};
use crate::illumination::AtmosphereSamplerParams;
use crate::sae::{AutoencoderSpec, SaeTrainConfig};
use crate::spectral::{format_list, parse_f64_list, Header, WavelengthGrid};
use crate::synth::{SceneSpec, TruthAtmosphere};

/// One arm of the classifier ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub name: &'static str,
    /// Start from corpus-pretrained weights instead of a fresh network.
    pub transfer: bool,
    /// Relighting augmentation during training.
    pub augment: bool,
}

pub const ARMS: [Arm; 4] = [
    Arm {
        name: "baseline",
        transfer: false,
        augment: false,
    },
    Arm {
        name: "transfer",
        transfer: true,
        augment: false,
    },
    Arm {
        name: "augment",
        transfer: false,
        augment: true,
    },
    Arm {
        name: "combined",
        transfer: true,
        augment: true,
    },
];

impl Arm {
    pub fn by_name(name: &str) -> Option<Arm> {
        ARMS.iter().copied().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// External cube; when unset the `synth` stage provides one.
    pub cube: Option<PathBuf>,
    /// Ground truth for an external cube, used only by evaluation.
    pub labels: Option<PathBuf>,
    pub scene: SceneSpec,
    /// Truth atmosphere preset name, kept for printing.
    pub scene_atmosphere: String,
    /// Seeds the scene layout; defaults to the run seed.
    pub layout_seed: Option<u64>,
    pub sae_spec: AutoencoderSpec,
    pub sae: SaeTrainConfig,
    pub sampler: AtmosphereSamplerParams,
    pub kmeans: KMeansConfig,
    pub labels_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub corpus: CorpusSpec,
    /// Labelled CSV corpus replacing the synthetic one.
    pub corpus_path: Option<PathBuf>,
    pub pretrain_epochs: usize,
    /// Architecture of the pretrained network; fresh arms swap in the cube grid.
    pub cnn: CnnSpec,
    pub cnn_train: CnnTrainConfig,
    pub arms: Vec<Arm>,
    pub test_pixels: usize,
    /// Per-epoch F1 curves are computed on this many of the test pixels.
    pub curve_pixels: usize,
    /// Cube to map instead of the training cube.
    pub classify_cube: Option<PathBuf>,
    /// Suffix for maps of `classify_cube`.
    pub classify_tag: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = Self {
            out_dir: PathBuf::from("run"),
            seed: 0,
            cube: None,
            labels: None,
            scene: SceneSpec::default(),
            scene_atmosphere: "morning".into(),
            layout_seed: None,
            sae_spec: AutoencoderSpec::default(),
            sae: SaeTrainConfig::default(),
            sampler: AtmosphereSamplerParams::default(),
            kmeans: KMeansConfig::default(),
            labels_per_class: 200,
            train_per_class: 180,
            val_per_class: 20,
            corpus: CorpusSpec::default(),
            corpus_path: None,
            pretrain_epochs: 200,
            cnn: CnnSpec::default(),
            cnn_train: CnnTrainConfig::default(),
            arms: ARMS.to_vec(),
            test_pixels: 120_000,
            curve_pixels: 4000,
            classify_cube: None,
            classify_tag: "second".into(),
        };
        cfg.set_seed(0);
        cfg
    }
}

fn list_of(value: &str) -> std::result::Result<Vec<String>, String> {
    let inner = value
        .trim()
        .strip_prefix('{')
        .and_then(|v| v.strip_suffix('}'))
        .ok_or_else(|| format!("expected a `{{...}}` list, found {value:?}"))?;
    Ok(inner
        .split(',')
        .map(|t| t.trim().to_owned())
        .filter(|t| !t.is_empty())
        .collect())
}

fn usize_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    list_of(value)?
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad count {t:?}")))
        .collect()
}

fn pair(value: &str) -> std::result::Result<(f64, f64), String> {
    match parse_f64_list(value)?.as_slice() {
        &[a, b] => Ok((a, b)),
        other => Err(format!("expected two values, found {}", other.len())),
    }
}

fn scalar<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse {value:?}"))
}

fn atmosphere(name: &str) -> std::result::Result<TruthAtmosphere, String> {
    match name {
        "morning" => Ok(TruthAtmosphere::morning()),
        "afternoon" => Ok(TruthAtmosphere::afternoon()),
        _ => Err(format!("unknown atmosphere {name:?}; expected `morning` or `afternoon`")),
    }
}

impl PipelineConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header = Header::read(path)?;
        let mut cfg = Self::default();
        for (key, value, offset) in header.entries() {
            cfg.set(key, value).map_err(|m| header.error(offset, format!("`{key}`: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the run seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = self.layout_seed.unwrap_or(seed);
        self.sae.seed = seed;
        self.sampler.seed = seed;
        self.kmeans.seed = seed;
        self.corpus.seed = seed;
        self.cnn_train.seed = seed;
    }

    /// Applies one `key = value` setting, as from the file or a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "out" => self.out_dir = PathBuf::from(v),
            "seed" => self.set_seed(scalar(v)?),
            "input.cube" => self.cube = Some(PathBuf::from(v)),
            "input.labels" => self.labels = Some(PathBuf::from(v)),

            "synth.height" => self.scene.height = scalar(v)?,
            "synth.width" => self.scene.width = scalar(v)?,
            "synth.sky_fraction" => self.scene.sky_fraction = scalar(v)?,
            "synth.variability" => self.scene.variability = scalar(v)?,
            "synth.brightness" => self.scene.brightness = pair(v)?,
            "synth.shadow_coverage" => self.scene.shadow.coverage = scalar(v)?,
            "synth.shadow_radius" => self.scene.shadow.radius = pair(v)?,
            "synth.shadow_feather" => self.scene.shadow.feather = scalar(v)?,
            "synth.gamma_min" => self.scene.shadow.gamma_min = scalar(v)?,
            "synth.noise_sigma" => self.scene.noise_sigma = scalar(v)?,
            "synth.sky_noise_sigma" => self.scene.sky_noise_sigma = scalar(v)?,
            "synth.atmosphere" => {
                self.scene.atmosphere = atmosphere(v)?;
                self.scene_atmosphere = v.to_owned();
            }
            "synth.layout_seed" => {
                let s = scalar(v)?;
                self.layout_seed = Some(s);
                self.scene.seed = s;
            }

            "sae.encoder_sizes" => self.sae_spec.encoder_sizes = usize_list(v)?,
            "sae.normalise_input" => self.sae_spec.normalise_input = scalar(v)?,
            "sae.pretrain_epochs" => self.sae.pretrain_epochs = scalar(v)?,
            "sae.pretrain_batch" => self.sae.pretrain_batch = scalar(v)?,
            "sae.pretrain_max_samples" => {
                self.sae.pretrain_max_samples = if v == "all" { None } else { Some(scalar(v)?) }
            }
            "sae.finetune_samples" => self.sae.finetune_samples = scalar(v)?,
            "sae.finetune_epochs" => self.sae.finetune_epochs = scalar(v)?,
            "sae.finetune_batch" => self.sae.finetune_batch = scalar(v)?,
            "sae.atmospheres_per_sample" => self.sae.atmospheres_per_sample = scalar(v)?,
            "sae.learning_rate" => self.sae.learning_rate = scalar(v)?,
            "sae.momentum" => self.sae.momentum = scalar(v)?,
            "sae.early_stop_patience" => self.sae.early_stop_patience = scalar(v)?,
            "sae.early_stop_min_delta" => self.sae.early_stop_min_delta = scalar(v)?,

            "sampler.blue_bias" => self.sampler.blue_bias = pair(v)?,
            "sampler.sky_to_sun_ratio" => self.sampler.sky_to_sun_ratio = pair(v)?,
            "sampler.smoothness" => self.sampler.smoothness = scalar(v)?,
            "sampler.reference_nm" => self.sampler.reference_nm = scalar(v)?,

            "cluster.k" => self.kmeans.k = scalar(v)?,
            "cluster.restarts" => self.kmeans.restarts = scalar(v)?,
            "cluster.max_iters" => self.kmeans.max_iters = scalar(v)?,

            "extract.per_class" => self.labels_per_class = scalar(v)?,
            "extract.train_per_class" => self.train_per_class = scalar(v)?,
            "extract.val_per_class" => self.val_per_class = scalar(v)?,

            "corpus.path" => self.corpus_path = Some(PathBuf::from(v)),
            "corpus.classes" => self.corpus.classes = scalar(v)?,
            "corpus.per_class" => self.corpus.per_class = scalar(v)?,
            "corpus.shaded_fraction" => self.corpus.shaded_fraction = scalar(v)?,
            "corpus.noise_sigma" => self.corpus.noise_sigma = scalar(v)?,
            "pretrain.epochs" => self.pretrain_epochs = scalar(v)?,

            "cnn.kernels" => self.cnn.kernels = usize_list(v)?,
            "cnn.channels" => self.cnn.channels = usize_list(v)?,
            "cnn.hidden" => self.cnn.hidden = usize_list(v)?,
            "cnn.grid" => {
                let g = parse_f64_list(v)?;
                let &[first, last, count] = g.as_slice() else {
                    return Err("expected {first_nm, last_nm, count}".into());
                };
                if count < 1.0 || count.fract() != 0.0 {
                    return Err(format!("band count {count} must be a positive integer"));
                }
                self.cnn.grid =
                    Arc::new(WavelengthGrid::linspace(first, last, count as usize).map_err(|e| e.to_string())?);
            }
            "cnn.epochs" => self.cnn_train.epochs = scalar(v)?,
            "cnn.batch_size" => self.cnn_train.batch_size = scalar(v)?,
            "cnn.learning_rate" => self.cnn_train.learning_rate = scalar(v)?,
            "cnn.momentum" => self.cnn_train.momentum = scalar(v)?,
            "cnn.n_variants" => self.cnn_train.n_variants = scalar(v)?,
            "cnn.selection" => {
                self.cnn_train.selection = match v {
                    "best" => Selection::BestValidation,
                    "last" => Selection::Last,
                    _ => return Err(format!("expected `best` or `last`, found {v:?}")),
                }
            }
            "cnn.freeze_batchnorm" => self.cnn_train.freeze_batchnorm = scalar(v)?,

            "ablation.arms" => {
                self.arms = list_of(v)?
                    .iter()
                    .map(|n| Arm::by_name(n).ok_or_else(|| format!("unknown arm {n:?}")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "eval.test_pixels" => self.test_pixels = scalar(v)?,
            "eval.curve_pixels" => self.curve_pixels = scalar(v)?,
            "classify.cube" => self.classify_cube = Some(PathBuf::from(v)),
            "classify.tag" => self.classify_tag = v.to_owned(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.sae_spec.validate()?;
        self.sae.validate()?;
        self.sampler.validate()?;
        self.cnn.validate()?;
        self.cnn_train.validate()?;
        if self.kmeans.k < 2 || self.kmeans.restarts == 0 {
            return Err(Error::Config("cluster.k must be >= 2 and cluster.restarts >= 1".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return Err(Error::Config("extract.train_per_class and extract.val_per_class must be >= 1".into()));
        }
        if self.train_per_class + self.val_per_class > self.labels_per_class {
            return Err(Error::Config(format!(
                "split {}+{} exceeds extract.per_class = {}",
                self.train_per_class, self.val_per_class, self.labels_per_class
            )));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("ablation.arms is empty".into()));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.arms.len() {
            return Err(Error::Config("ablation.arms lists an arm twice".into()));
        }
        if self.test_pixels == 0 || self.curve_pixels == 0 {
            return Err(Error::Config("eval.test_pixels and eval.curve_pixels must be >= 1".into()));
        }
        if self.classify_tag.is_empty() || !self.classify_tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Config(format!(
                "classify.tag {:?} must be non-empty letters, digits or `_`",
                self.classify_tag
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`PipelineConfig::read`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let usizes = |v: &[usize]| format_list(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        let p = |(a, b): (f64, f64)| format_list(&[a, b]);
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("out", self.out_dir.display().to_string());
        kv("seed", self.seed.to_string());
        if let Some(c) = &self.cube {
            kv("input.cube", c.display().to_string());
        }
        if let Some(l) = &self.labels {
            kv("input.labels", l.display().to_string());
        }
        let sc = &self.scene;
        kv("synth.height", sc.height.to_string());
        kv("synth.width", sc.width.to_string());
        kv("synth.sky_fraction", sc.sky_fraction.to_string());
        kv("synth.variability", sc.variability.to_string());
        kv("synth.brightness", p(sc.brightness));
        kv("synth.shadow_coverage", sc.shadow.coverage.to_string());
        kv("synth.shadow_radius", p(sc.shadow.radius));
        kv("synth.shadow_feather", sc.shadow.feather.to_string());
        kv("synth.gamma_min", sc.shadow.gamma_min.to_string());
        kv("synth.noise_sigma", sc.noise_sigma.to_string());
        kv("synth.sky_noise_sigma", sc.sky_noise_sigma.to_string());
        kv("synth.atmosphere", self.scene_atmosphere.clone());
        if let Some(seed) = self.layout_seed {
            kv("synth.layout_seed", seed.to_string());
        }
        kv("sae.encoder_sizes", usizes(&self.sae_spec.encoder_sizes));
        kv("sae.normalise_input", self.sae_spec.normalise_input.to_string());
        kv("sae.pretrain_epochs", self.sae.pretrain_epochs.to_string());
        kv("sae.pretrain_batch", self.sae.pretrain_batch.to_string());
        kv(
            "sae.pretrain_max_samples",
            self.sae.pretrain_max_samples.map_or("all".into(), |n| n.to_string()),
        );
        kv("sae.finetune_samples", self.sae.finetune_samples.to_string());
        kv("sae.finetune_epochs", self.sae.finetune_epochs.to_string());
        kv("sae.finetune_batch", self.sae.finetune_batch.to_string());
        kv("sae.atmospheres_per_sample", self.sae.atmospheres_per_sample.to_string());
        kv("sae.learning_rate", self.sae.learning_rate.to_string());
        kv("sae.momentum", self.sae.momentum.to_string());
        kv("sae.early_stop_patience", self.sae.early_stop_patience.to_string());
        kv("sae.early_stop_min_delta", self.sae.early_stop_min_delta.to_string());
        kv("sampler.blue_bias", p(self.sampler.blue_bias));
        kv("sampler.sky_to_sun_ratio", p(self.sampler.sky_to_sun_ratio));
        kv("sampler.smoothness", self.sampler.smoothness.to_string());
        kv("sampler.reference_nm", self.sampler.reference_nm.to_string());
        kv("cluster.k", self.kmeans.k.to_string());
        kv("cluster.restarts", self.kmeans.restarts.to_string());
        kv("cluster.max_iters", self.kmeans.max_iters.to_string());
        kv("extract.per_class", self.labels_per_class.to_string());
        kv("extract.train_per_class", self.train_per_class.to_string());
        kv("extract.val_per_class", self.val_per_class.to_string());
        if let Some(c) = &self.corpus_path {
            kv("corpus.path", c.display().to_string());
        }
        kv("corpus.classes", self.corpus.classes.to_string());
        kv("corpus.per_class", self.corpus.per_class.to_string());
        kv("corpus.shaded_fraction", self.corpus.shaded_fraction.to_string());
        kv("corpus.noise_sigma", self.corpus.noise_sigma.to_string());
        kv("pretrain.epochs", self.pretrain_epochs.to_string());
        kv("cnn.kernels", usizes(&self.cnn.kernels));
        kv("cnn.channels", usizes(&self.cnn.channels));
        kv("cnn.hidden", usizes(&self.cnn.hidden));
        let g = &self.cnn.grid;
        kv("cnn.grid", format_list(&[g.first(), g.last(), g.len() as f64]));
        let t = &self.cnn_train;
        kv("cnn.epochs", t.epochs.to_string());
        kv("cnn.batch_size", t.batch_size.to_string());
        kv("cnn.learning_rate", t.learning_rate.to_string());
        kv("cnn.momentum", t.momentum.to_string());
        kv("cnn.n_variants", t.n_variants.to_string());
        kv(
            "cnn.selection",
            match t.selection {
                Selection::BestValidation => "best".into(),
                Selection::Last => "last".into(),
            },
        );
        kv("cnn.freeze_batchnorm", t.freeze_batchnorm.to_string());
        kv(
            "ablation.arms",
            format!("{{{}}}", self.arms.iter().map(|a| a.name).collect::<Vec<_>>().join(", ")),
        );
        kv("eval.test_pixels", self.test_pixels.to_string());
        kv("eval.curve_pixels", self.curve_pixels.to_string());
        if let Some(c) = &self.classify_cube {
            kv("classify.cube", c.display().to_string());
        }
        kv("classify.tag", self.classify_tag.clone());
        s
    }

}
