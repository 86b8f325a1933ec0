//! Confusion matrices, precision/recall/F1 and cluster agreement.

use std::fmt::Write as _;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::spectral::UNLABELLED;

/// `counts[truth][pred]` over labelled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }
}

/// Counts `(truth, pred)` pairs, skipping pixels whose truth is [`UNLABELLED`].
///
/// The class count is one more than the largest label seen in either raster.
/// A labelled pixel predicted as [`UNLABELLED`] is an input error.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let classes = pred
        .iter()
        .chain(truth)
        .filter(|&&l| l != UNLABELLED)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    confusion_with_classes(pred, truth, classes)
}

/// [`confusion`] with an explicit class count.
pub fn confusion_with_classes(pred: &[u8], truth: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if t == UNLABELLED {
            continue;
        }
        if p == UNLABELLED || p as usize >= classes || t as usize >= classes {
            return Err(Error::Label(format!(
                "pixel {i}: truth {t}, prediction {p} outside {classes} classes"
            )));
        }
        cm.add(t as usize, p as usize);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub labelled: u64,
    pub accuracy: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "labelled = {}", self.labelled).unwrap();
        writeln!(s, "accuracy = {:.6}", self.accuracy).unwrap();
        writeln!(s, "macro_f1 = {:.6}", self.macro_f1).unwrap();
        for (c, m) in self.per_class.iter().enumerate() {
            writeln!(
                s,
                "class {c}: precision = {:.6}, recall = {:.6}, f1 = {:.6}{}",
                m.precision,
                m.recall,
                m.f1,
                if m.undefined { " (undefined)" } else { "" }
            )
            .unwrap();
        }
        s
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> MetricsReport {
    let k = cm.classes();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let actual: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let p = ratio(tp, predicted);
            let r = ratio(tp, actual);
            let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                undefined: p.is_none() || r.is_none(),
            }
        })
        .collect();
    let macro_f1 = if k == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / k as f64
    };
    MetricsReport {
        per_class,
        macro_f1,
        labelled: cm.total(),
        accuracy: cm.accuracy(),
    }
}

/// Largest cluster count [`cluster_agreement`] will enumerate.
pub const MAX_AGREEMENT_CLASSES: usize = 8;

/// Best fraction of labelled pixels on which `assignments` equals `truth`
/// after relabelling clusters by some permutation, and that permutation
/// (`mapping[cluster] = class`).
pub fn cluster_agreement(assignments: &[usize], truth: &[u8]) -> Result<(f64, Vec<usize>)> {
    if assignments.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} assignments for {} truth pixels",
            assignments.len(),
            truth.len()
        )));
    }
    let k_pred = assignments.iter().map(|&a| a + 1).max().unwrap_or(0);
    let k_truth = truth
        .iter()
        .filter(|&&t| t != UNLABELLED)
        .map(|&t| t as usize + 1)
        .max()
        .unwrap_or(0);
    let k = k_pred.max(k_truth);
    if k > MAX_AGREEMENT_CLASSES {
        return Err(Error::Input(format!(
            "cluster agreement enumerates permutations of at most {MAX_AGREEMENT_CLASSES} labels, got {k}"
        )));
    }
    let mut joint = vec![0u64; k * k];
    let mut labelled = 0u64;
    for (&a, &t) in assignments.iter().zip(truth) {
        if t != UNLABELLED {
            joint[a * k + t as usize] += 1;
            labelled += 1;
        }
    }
    if labelled == 0 {
        return Err(Error::Input("no labelled pixels".into()));
    }
    let mut best = (0u64, (0..k).collect::<Vec<_>>());
    for perm in (0..k).permutations(k) {
        let hits: u64 = perm.iter().enumerate().map(|(a, &t)| joint[a * k + t]).sum();
        if hits > best.0 {
            best = (hits, perm);
        }
    }
    Ok((best.0 as f64 / labelled as f64, best.1))
}
