//! End-to-end orchestration: each stage reads its inputs from the run
//! directory, writes its artifacts there and leaves a `<stage>.manifest`.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};

pub use config::{Arm, PipelineConfig, ARMS};
pub use manifest::{sha256_file, Manifest};

use crate::cluster::{extract_confident, kmeans_cube, split_train_val, ClusterModel, ConfidentSet};
use crate::cnn::{
    classify_cube, pretrain_on_corpus, render_labels, synthetic_corpus, train, transfer_init, CnnState,
    CnnTrainConfig, LabelledSpectra, PretrainedWeights, TrainLog,
};
use crate::error::{Error, Result};
use crate::metrics::{cluster_agreement, confusion_with_classes, precision_recall_f1, MetricsReport};
use crate::render;
use crate::rng::{stream, streams};
use crate::sae::{encode, finetune, pretrain_layerwise, EncoderState};
use crate::spectral::{
    format_list, read_cube, read_labels, write_cube, write_labels, Header, HyperspectralCube, LabelRaster, UNLABELLED,
};
use crate::synth::generate_scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    TrainSae,
    Encode,
    Cluster,
    Extract,
    PretrainCnn,
    TrainCnn,
    Classify,
    Eval,
    Report,
    All,
}

impl Stage {
    /// Every concrete stage in execution order.
    pub const ORDER: [Stage; 10] = [
        Stage::Synth,
        Stage::TrainSae,
        Stage::Encode,
        Stage::Cluster,
        Stage::Extract,
        Stage::PretrainCnn,
        Stage::TrainCnn,
        Stage::Classify,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainSae => "train-sae",
            Stage::Encode => "encode",
            Stage::Cluster => "cluster",
            Stage::Extract => "extract",
            Stage::PretrainCnn => "pretrain-cnn",
            Stage::TrainCnn => "train-cnn",
            Stage::Classify => "classify",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .iter()
            .chain([&Stage::All])
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Artifact paths inside the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    fn at(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
    pub fn scene(&self) -> PathBuf {
        self.at("scene.img")
    }
    pub fn truth(&self) -> PathBuf {
        self.at("truth.lbl")
    }
    pub fn shadow(&self) -> PathBuf {
        self.at("shadow.lbl")
    }
    pub fn encoder(&self) -> PathBuf {
        self.at("encoder.bin")
    }
    pub fn codes(&self) -> PathBuf {
        self.at("codes.img")
    }
    pub fn clusters(&self) -> PathBuf {
        self.at("clusters.lbl")
    }
    pub fn centroids(&self) -> PathBuf {
        self.at("centroids.csv")
    }
    pub fn mapping(&self) -> PathBuf {
        self.at("cluster_mapping.txt")
    }
    pub fn confident(&self) -> PathBuf {
        self.at("confident.csv")
    }
    pub fn train_set(&self) -> PathBuf {
        self.at("train.csv")
    }
    pub fn val_set(&self) -> PathBuf {
        self.at("val.csv")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.at("pretrained.bin")
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.at("pretrain_log.csv")
    }
    pub fn model(&self, arm: &Arm) -> PathBuf {
        self.at(&format!("cnn_{}.bin", arm.name))
    }
    pub fn log(&self, arm: &Arm) -> PathBuf {
        self.at(&format!("log_{}.csv", arm.name))
    }
    pub fn map(&self, arm: &Arm, tag: Option<&str>) -> PathBuf {
        match tag {
            Some(t) => self.at(&format!("map_{}_{t}.lbl", arm.name)),
            None => self.at(&format!("map_{}.lbl", arm.name)),
        }
    }
    pub fn metrics(&self, arm: &Arm) -> PathBuf {
        self.at(&format!("metrics_{}.txt", arm.name))
    }
    pub fn curve(&self, arm: &Arm) -> PathBuf {
        self.at(&format!("curve_{}.csv", arm.name))
    }
    pub fn report(&self) -> PathBuf {
        self.at("report.txt")
    }
    pub fn timings(&self) -> PathBuf {
        self.at("timings.txt")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.at(&format!("{}.manifest", stage.name()))
    }
}

/// A raster file and its `.hdr`.
fn with_header(path: &Path) -> [PathBuf; 2] {
    [path.to_owned(), PathBuf::from(format!("{}.hdr", path.display()))]
}

/// Files a stage read and wrote.
#[derive(Default)]
struct Io {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Io {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_owned());
    }
    fn raster_input(&mut self, p: &Path) {
        self.inputs.extend(with_header(p));
    }
    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_owned());
    }
    fn raster_output(&mut self, p: &Path) {
        self.outputs.extend(with_header(p));
    }
}

struct Run<'a> {
    config: &'a PipelineConfig,
    layout: Layout,
    stage: Stage,
}

impl Run<'_> {
    fn require(&self, path: &Path, artifact: &str, producer: Stage) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Dependency {
                stage: self.stage.name().into(),
                artifact: format!("{artifact} ({})", path.display()),
                run_first: producer.name().into(),
            })
        }
    }

    fn external(&self, path: &Path, what: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} {} does not exist", path.display())))
        }
    }

    fn cube_path(&self) -> Result<PathBuf> {
        match &self.config.cube {
            Some(p) => {
                self.external(p, "input cube")?;
                Ok(p.clone())
            }
            None => {
                let p = self.layout.scene();
                self.require(&p, "the scene cube", Stage::Synth)?;
                Ok(p)
            }
        }
    }

    /// Ground truth, when the run has any.
    fn truth_path(&self) -> Result<Option<PathBuf>> {
        match (&self.config.labels, &self.config.cube) {
            (Some(p), _) => {
                self.external(p, "truth labels")?;
                Ok(Some(p.clone()))
            }
            (None, Some(_)) => Ok(None),
            (None, None) => {
                let p = self.layout.truth();
                self.require(&p, "the truth labels", Stage::Synth)?;
                Ok(Some(p))
            }
        }
    }

    fn load_cube(&self, io: &mut Io) -> Result<HyperspectralCube> {
        let p = self.cube_path()?;
        io.raster_input(&p);
        read_cube(&p)
    }

    fn load_truth(&self, io: &mut Io) -> Result<Option<LabelRaster>> {
        self.truth_path()?
            .map(|p| {
                io.raster_input(&p);
                read_labels(&p)
            })
            .transpose()
    }

    fn load_mapping(&self, io: &mut Io) -> Result<Option<Vec<usize>>> {
        let p = self.layout.mapping();
        if !p.exists() {
            return Ok(None);
        }
        io.input(&p);
        let h = Header::read(&p)?;
        Ok(Some(h.f64_list("mapping")?.into_iter().map(|v| v as usize).collect()))
    }

    fn load_confident(&self, path: &Path, io: &mut Io) -> Result<ConfidentSet> {
        self.require(path, "the confident training set", Stage::Extract)?;
        io.input(path);
        ConfidentSet::read_csv(path)
    }

    fn synth(&self, io: &mut Io) -> Result<()> {
        if self.config.cube.is_some() {
            return Err(Error::Config("`input.cube` is set; the synth stage has nothing to do".into()));
        }
        let scene = generate_scene(&self.config.scene, self.config.seed)?;
        let l = &self.layout;
        write_cube(&scene.cube, l.scene())?;
        write_labels(&scene.labels, l.truth())?;
        let mask: Vec<u8> = scene.shadow_mask.iter().map(|&s| s as u8).collect();
        write_labels(&LabelRaster::new(scene.cube.height(), scene.cube.width(), 2, mask)?, l.shadow())?;
        for p in [l.scene(), l.truth(), l.shadow()] {
            io.raster_output(&p);
        }
        let preview = l.at("scene.png");
        false_colour(&scene.cube, &preview)?;
        io.output(&preview);
        Ok(())
    }

    fn train_sae(&self, io: &mut Io) -> Result<()> {
        let cube = self.load_cube(io)?;
        let c = self.config;
        let mut spec = c.sae_spec.clone();
        spec.input_bands = cube.bands();
        let state = pretrain_layerwise(&cube, &spec, &c.sae)?;
        let state = finetune(&state, &cube, Some(&c.sampler), &c.sae)?;
        let p = self.layout.encoder();
        state.save(&p)?;
        io.output(&p);
        io.output(&PathBuf::from(format!("{}.meta", p.display())));
        Ok(())
    }

    fn encode(&self, io: &mut Io) -> Result<()> {
        let cube = self.load_cube(io)?;
        let enc = self.layout.encoder();
        self.require(&enc, "the trained encoder", Stage::TrainSae)?;
        io.input(&enc);
        let state = EncoderState::load(&enc)?;
        let codes = encode(&state, &cube)?;
        write_cube(&codes, self.layout.codes())?;
        io.raster_output(&self.layout.codes());
        Ok(())
    }

    fn load_codes(&self, io: &mut Io) -> Result<HyperspectralCube> {
        let p = self.layout.codes();
        self.require(&p, "the encoded cube", Stage::Encode)?;
        io.raster_input(&p);
        read_cube(&p)
    }

    fn cluster(&self, io: &mut Io) -> Result<()> {
        let codes = self.load_codes(io)?;
        let (model, assignments) = kmeans_cube(&codes, &self.config.kmeans)?;
        let l = &self.layout;
        model.write_centroids(l.centroids())?;
        io.output(&l.centroids());
        let raster = LabelRaster::new(
            codes.height(),
            codes.width(),
            model.k,
            assignments.iter().map(|&a| a as u8).collect(),
        )?;
        write_labels(&raster, l.clusters())?;
        io.raster_output(&l.clusters());
        let png = l.at("clusters.png");
        render_labels(&raster, &png)?;
        io.output(&png);
        if let Some(truth) = self.load_truth(io)? {
            let (agreement, mapping) = cluster_agreement(&assignments, truth.labels())?;
            let text = format!(
                "agreement = {agreement:.6}\nmapping = {}\n",
                format_list(&mapping.iter().map(|&m| m as f64).collect::<Vec<_>>())
            );
            fs::write(l.mapping(), text).map_err(|e| Error::io(l.mapping(), e))?;
            io.output(&l.mapping());
        }
        Ok(())
    }

    fn extract(&self, io: &mut Io) -> Result<()> {
        let codes = self.load_codes(io)?;
        let cube = self.load_cube(io)?;
        let l = &self.layout;
        self.require(&l.centroids(), "cluster centroids", Stage::Cluster)?;
        self.require(&l.clusters(), "cluster assignments", Stage::Cluster)?;
        io.input(&l.centroids());
        io.raster_input(&l.clusters());
        let model = ClusterModel::read_centroids(l.centroids())?;
        let assignments: Vec<usize> = read_labels(l.clusters())?.labels().iter().map(|&a| a as usize).collect();
        let c = self.config;
        let set = extract_confident(&codes, &cube, &model, &assignments, c.labels_per_class)?;
        let (train_set, val_set) = split_train_val(&set, c.train_per_class, c.val_per_class, c.seed)?;
        for (s, p) in [(&set, l.confident()), (&train_set, l.train_set()), (&val_set, l.val_set())] {
            s.write_csv(&p)?;
            io.output(&p);
        }
        Ok(())
    }

    fn pretrain_cnn(&self, io: &mut Io) -> Result<()> {
        let c = self.config;
        let corpus = match &c.corpus_path {
            Some(p) => {
                self.external(p, "corpus")?;
                io.input(p);
                LabelledSpectra::read_csv(p)?
            }
            None => synthetic_corpus(&c.cnn.grid, &c.corpus)?,
        };
        let config = CnnTrainConfig {
            epochs: c.pretrain_epochs,
            augment: false,
            ..c.cnn_train.clone()
        };
        let (weights, log) = pretrain_on_corpus(&corpus, &c.cnn, &config)?;
        let l = &self.layout;
        weights.save(l.pretrained())?;
        log.write_csv(l.pretrain_log())?;
        io.output(&l.pretrained());
        io.output(&PathBuf::from(format!("{}.meta", l.pretrained().display())));
        io.output(&l.pretrain_log());
        Ok(())
    }

    fn train_cnn(&self, io: &mut Io) -> Result<()> {
        let c = self.config;
        let l = &self.layout;
        let train_set = LabelledSpectra::from_confident(&self.load_confident(&l.train_set(), io)?)?;
        let val_set = LabelledSpectra::from_confident(&self.load_confident(&l.val_set(), io)?)?;
        let classes = train_set.classes().max(val_set.classes());
        let curve_set = self.curve_set(classes, io)?;
        let pretrained = if c.arms.iter().any(|a| a.transfer) {
            self.require(&l.pretrained(), "pretrained weights", Stage::PretrainCnn)?;
            io.input(&l.pretrained());
            Some(PretrainedWeights::load(l.pretrained())?)
        } else {
            None
        };
        for arm in &c.arms {
            let init = match (&pretrained, arm.transfer) {
                (Some(p), true) => transfer_init(p, classes, c.seed)?,
                _ => CnnState::fresh(c.cnn.with_grid(train_set.grid.clone()).with_classes(classes), c.seed)?,
            };
            let config = CnnTrainConfig {
                augment: arm.augment,
                ..c.cnn_train.clone()
            };
            let (state, log) = train(&init, &train_set, &val_set, curve_set.as_ref(), &config)?;
            state.save(l.model(arm))?;
            log.write_csv(l.log(arm))?;
            io.output(&l.model(arm));
            io.output(&PathBuf::from(format!("{}.meta", l.model(arm).display())));
            io.output(&l.log(arm));
        }
        Ok(())
    }

    /// Held-out truth pixels in pseudo-label space for per-epoch F1 curves;
    /// needs truth and a cluster-to-class mapping.
    fn curve_set(&self, classes: usize, io: &mut Io) -> Result<Option<LabelledSpectra>> {
        let Some(truth) = self.load_truth(io)? else {
            return Ok(None);
        };
        let Some(mapping) = self.load_mapping(io)? else {
            return Ok(None);
        };
        let cube = self.load_cube(io)?;
        let mut pseudo = vec![usize::MAX; mapping.len()];
        for (cluster, &class) in mapping.iter().enumerate() {
            pseudo[class] = cluster;
        }
        let labels = truth.labels();
        let picks: Vec<usize> = curve_indices(labels, self.config.test_pixels, self.config.curve_pixels, self.config.seed)
            .into_iter()
            .filter(|&p| pseudo.get(labels[p] as usize).is_some_and(|&q| q < classes))
            .collect();
        let bands = cube.bands();
        let mut values = vec![0.0f32; picks.len() * bands];
        for (&p, out) in picks.iter().zip(values.chunks_exact_mut(bands)) {
            cube.gather_pixels(p, 1, out);
        }
        let pseudo_labels = picks.iter().map(|&p| pseudo[labels[p] as usize]).collect();
        Ok(Some(LabelledSpectra::new(cube.grid().clone(), pseudo_labels, values)?))
    }

    fn classify(&self, io: &mut Io) -> Result<()> {
        let c = self.config;
        let l = &self.layout;
        let (cube, tag) = match &c.classify_cube {
            Some(p) => {
                self.external(p, "cube to classify")?;
                io.raster_input(p);
                (read_cube(p)?, Some(c.classify_tag.as_str()))
            }
            None => (self.load_cube(io)?, None),
        };
        for arm in &c.arms {
            self.require(&l.model(arm), &format!("the `{}` classifier", arm.name), Stage::TrainCnn)?;
            io.input(&l.model(arm));
            let state = CnnState::load(l.model(arm))?;
            let map = classify_cube(&state, &cube)?;
            let path = l.map(arm, tag);
            write_labels(&map.labels, &path)?;
            io.raster_output(&path);
            let png = path.with_extension("png");
            render_labels(&map.labels, &png)?;
            io.output(&png);
        }
        Ok(())
    }

    fn eval(&self, io: &mut Io) -> Result<()> {
        let c = self.config;
        let l = &self.layout;
        let truth = self
            .load_truth(io)?
            .ok_or_else(|| Error::Config("evaluation needs ground truth; set `input.labels`".into()))?;
        let mapping = self.load_mapping(io)?.ok_or_else(|| Error::Dependency {
            stage: self.stage.name().into(),
            artifact: format!("the cluster-to-class mapping ({})", l.mapping().display()),
            run_first: Stage::Cluster.name().into(),
        })?;
        let shadow = if c.cube.is_none() && l.shadow().exists() {
            io.raster_input(&l.shadow());
            Some(read_labels(l.shadow())?)
        } else {
            None
        };
        let test = test_indices(truth.labels(), c.test_pixels, c.seed);
        let classes = mapping.len().max(truth.classes());
        for arm in &c.arms {
            let path = l.map(arm, None);
            self.require(&path, &format!("the `{}` thematic map", arm.name), Stage::Classify)?;
            io.raster_input(&path);
            let map = read_labels(&path)?;
            if map.labels().len() != truth.labels().len() {
                return Err(Error::Dimension("thematic map and truth differ in size".into()));
            }
            let to_class = |p: usize| mapping.get(map.labels()[p] as usize).map_or(UNLABELLED, |&m| m as u8);
            let pred: Vec<u8> = test.iter().map(|&p| to_class(p)).collect();
            let want: Vec<u8> = test.iter().map(|&p| truth.labels()[p]).collect();
            let report = precision_recall_f1(&confusion_with_classes(&pred, &want, classes)?);
            let mut text = report.to_text();
            if let Some(mask) = &shadow {
                let want_shadow: Vec<u8> = test
                    .iter()
                    .map(|&p| if mask.labels()[p] == 1 { truth.labels()[p] } else { UNLABELLED })
                    .collect();
                let cm = confusion_with_classes(&pred, &want_shadow, classes)?;
                let shadow_report = precision_recall_f1(&cm);
                // averaged over classes that occur in shadow; sky never does
                let present: Vec<f64> = (0..classes)
                    .filter(|&c| (0..classes).any(|p| cm.get(c, p) > 0))
                    .map(|c| shadow_report.per_class[c].f1)
                    .collect();
                let shadow_f1 = if present.is_empty() {
                    0.0
                } else {
                    present.iter().sum::<f64>() / present.len() as f64
                };
                writeln!(text, "shadow_labelled = {}", shadow_report.labelled).unwrap();
                writeln!(text, "shadow_macro_f1 = {shadow_f1:.6}").unwrap();
            }
            fs::write(l.metrics(arm), text).map_err(|e| Error::io(l.metrics(arm), e))?;
            io.output(&l.metrics(arm));
        }
        Ok(())
    }

    fn report(&self, io: &mut Io) -> Result<()> {
        let l = &self.layout;
        let mut rows = Vec::new();
        for arm in &self.config.arms {
            self.require(&l.log(arm), &format!("the `{}` training log", arm.name), Stage::TrainCnn)?;
            self.require(&l.metrics(arm), &format!("the `{}` metrics", arm.name), Stage::Eval)?;
            io.input(&l.log(arm));
            io.input(&l.metrics(arm));
            let log = TrainLog::read_csv(l.log(arm))?;
            let metrics = Header::parse(&l.metrics(arm), &metric_lines(&l.metrics(arm))?)?;
            let curve = log.test_curve();
            let mut csv = String::from("epoch,test_f1\n");
            for (e, f) in curve.iter().enumerate() {
                writeln!(csv, "{},{f:.6}", e + 1).unwrap();
            }
            fs::write(l.curve(arm), csv).map_err(|e| Error::io(l.curve(arm), e))?;
            io.output(&l.curve(arm));
            rows.push(ArmSummary {
                arm: *arm,
                f1: metrics.value("macro_f1")?,
                shadow_f1: metrics.optional("shadow_macro_f1")?,
                convergence_epoch: convergence_epoch(&curve, CONVERGENCE_TOLERANCE),
                selected_epoch: log.selected_epoch,
                epochs: log.records.len(),
            });
        }
        let text = report_text(&rows);
        fs::write(l.report(), text).map_err(|e| Error::io(l.report(), e))?;
        io.output(&l.report());
        let timings = timings_text(l)?;
        fs::write(l.timings(), timings).map_err(|e| Error::io(l.timings(), e))?;
        Ok(())
    }
}

/// `key = value` lines of a metrics file (the per-class lines are skipped).
fn metric_lines(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with("class "))
        .map(|l| format!("{l}\n"))
        .collect())
}

/// A convergence epoch is the first with F1 within this fraction of the final F1.
pub const CONVERGENCE_TOLERANCE: f64 = 0.01;

/// First epoch (1-based) whose value lies within `tolerance · final` of the
/// final value; `None` for an empty curve.
pub fn convergence_epoch(curve: &[f64], tolerance: f64) -> Option<usize> {
    let last = *curve.last()?;
    curve
        .iter()
        .position(|&v| (v - last).abs() <= tolerance * last.abs())
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub f1: f64,
    pub shadow_f1: Option<f64>,
    pub convergence_epoch: Option<usize>,
    pub selected_epoch: Option<usize>,
    pub epochs: usize,
}

pub fn report_text(rows: &[ArmSummary]) -> String {
    let mut s = String::from("arm       transfer  augment  macro_f1  shadow_f1  epochs  convergence_epoch  selected_epoch\n");
    let opt = |v: Option<usize>| v.map_or("-".to_string(), |e| e.to_string());
    let yn = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        writeln!(
            s,
            "{:<9} {:<9} {:<8} {:<9.6} {:<10} {:<7} {:<18} {}",
            r.arm.name,
            yn(r.arm.transfer),
            yn(r.arm.augment),
            r.f1,
            r.shadow_f1.map_or("-".into(), |f| format!("{f:.6}")),
            r.epochs,
            opt(r.convergence_epoch),
            opt(r.selected_epoch),
        )
        .unwrap();
    }
    s
}

fn timings_text(l: &Layout) -> Result<String> {
    let mut s = String::from("stage          seconds\n");
    for stage in Stage::ORDER {
        let p = l.manifest(stage);
        if p.exists() {
            writeln!(s, "{:<14} {:.3}", stage.name(), Manifest::read(&p)?.seconds).unwrap();
        }
    }
    Ok(s)
}

/// Labelled pixel indices, subsampled to at most `count` and sorted.
pub fn test_indices(truth: &[u8], count: usize, seed: u64) -> Vec<usize> {
    let labelled: Vec<usize> = (0..truth.len()).filter(|&p| truth[p] != UNLABELLED).collect();
    if labelled.len() <= count {
        return labelled;
    }
    let mut rng = stream(seed, streams::EVAL);
    let mut picks: Vec<usize> = index::sample(&mut rng, labelled.len(), count)
        .into_iter()
        .map(|i| labelled[i])
        .collect();
    picks.sort_unstable();
    picks
}

/// A seeded subset of [`test_indices`] for per-epoch curves.
pub fn curve_indices(truth: &[u8], test_count: usize, curve_count: usize, seed: u64) -> Vec<usize> {
    let mut test = test_indices(truth, test_count, seed);
    if test.len() <= curve_count {
        return test;
    }
    let mut rng = stream(seed, streams::SUBSET);
    test.shuffle(&mut rng);
    test.truncate(curve_count);
    test.sort_unstable();
    test
}

/// Bands nearest 640, 550 and 460 nm, each stretched to 8 bits.
fn false_colour(cube: &HyperspectralCube, path: &Path) -> Result<()> {
    let wl = cube.grid().wavelengths();
    let nearest = |nm: f64| {
        (0..wl.len())
            .min_by(|&a, &b| (wl[a] - nm).abs().total_cmp(&(wl[b] - nm).abs()))
            .expect("non-empty grid")
    };
    let channels: Vec<Vec<u8>> = [640.0, 550.0, 460.0]
        .iter()
        .map(|&nm| render::normalise_to_u8(cube.band(nearest(nm))))
        .collect();
    let rgb = (0..cube.pixel_count())
        .flat_map(|p| [channels[0][p], channels[1][p], channels[2][p]])
        .collect();
    render::save_rgb(rgb, cube.height(), cube.width(), path)
}

/// What a stage did.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub manifest: Manifest,
}

/// Runs one stage (or all of them in order) and writes manifests.
pub fn run_stage(stage: Stage, config: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    config.validate()?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stages: Vec<Stage> = match stage {
        Stage::All => Stage::ORDER
            .into_iter()
            .filter(|s| match s {
                Stage::Synth => config.cube.is_none(),
                Stage::PretrainCnn => config.arms.iter().any(|a| a.transfer),
                Stage::Eval | Stage::Report => config.cube.is_none() || config.labels.is_some(),
                _ => true,
            })
            .collect(),
        s => vec![s],
    };
    let mut done = Vec::new();
    for s in stages {
        let run = Run {
            config,
            layout: Layout { dir: dir.clone() },
            stage: s,
        };
        let start = Instant::now();
        let mut io = Io::default();
        match s {
            Stage::Synth => run.synth(&mut io),
            Stage::TrainSae => run.train_sae(&mut io),
            Stage::Encode => run.encode(&mut io),
            Stage::Cluster => run.cluster(&mut io),
            Stage::Extract => run.extract(&mut io),
            Stage::PretrainCnn => run.pretrain_cnn(&mut io),
            Stage::TrainCnn => run.train_cnn(&mut io),
            Stage::Classify => run.classify(&mut io),
            Stage::Eval => run.eval(&mut io),
            Stage::Report => run.report(&mut io),
            Stage::All => unreachable!("expanded above"),
        }?;
        let mut seen = std::collections::HashSet::new();
        io.inputs.retain(|p| seen.insert(p.clone()));
        let manifest = Manifest::new(s.name(), config.seed, &io.inputs, &io.outputs, start.elapsed().as_secs_f64())?;
        manifest.write(run.layout.manifest(s))?;
        done.push(StageOutcome { stage: s, manifest });
    }
    Ok(done)
}

/// Metrics for one arm as written by the `eval` stage.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h = Header::parse(path, &metric_lines(path)?)?;
    let mut per_class = Vec::new();
    for line in text.lines().filter(|l| l.starts_with("class ")) {
        let field = |name: &str| -> Result<f64> {
            line.split(|c| c == ',' || c == ':')
                .filter_map(|kv| kv.split_once('='))
                .find(|(k, _)| k.trim() == name)
                .and_then(|(_, v)| v.trim().split(' ').next()?.parse().ok())
                .ok_or_else(|| Error::Input(format!("{}: bad class line {line:?}", path.display())))
        };
        per_class.push(crate::metrics::ClassMetrics {
            precision: field("precision")?,
            recall: field("recall")?,
            f1: field("f1")?,
            undefined: line.ends_with("(undefined)"),
        });
    }
    Ok(MetricsReport {
        per_class,
        macro_f1: h.value("macro_f1")?,
        labelled: h.value("labelled")?,
        accuracy: h.value("accuracy")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convergence_is_first_epoch_near_final() {
        assert_eq!(convergence_epoch(&[0.2, 0.5, 0.995, 0.9, 1.0], 0.01), Some(3));
        assert_eq!(convergence_epoch(&[0.7], 0.01), Some(1));
        assert_eq!(convergence_epoch(&[], 0.01), None);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ORDER.into_iter().chain([Stage::All]) {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn test_subsample_is_sorted_labelled_and_seeded() {
        let mut truth = vec![0u8; 1000];
        truth[3] = UNLABELLED;
        let a = test_indices(&truth, 100, 4);
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]) && !a.contains(&3));
        assert_eq!(a, test_indices(&truth, 100, 4));
        assert_eq!(test_indices(&truth, 5000, 4).len(), 999);
        let c = curve_indices(&truth, 100, 10, 4);
        assert!(c.len() == 10 && c.iter().all(|p| a.contains(p)));
    }
}
