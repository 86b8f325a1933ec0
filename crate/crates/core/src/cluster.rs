//! k-means in code space and extraction of the confident training set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{stream, streams};
use crate::spectral::{HyperspectralCube, WavelengthGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 3,
            restarts: 10,
            max_iters: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid (lowest index on ties) and the squared distance to it.
    pub fn nearest(&self, point: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, point)
    }

    /// Delimited text: `cluster, c0, c1, ...` per line.
    pub fn write_centroids(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("cluster");
        for d in 0..self.dim {
            write!(s, ",c{d}").unwrap();
        }
        s.push('\n');
        for c in 0..self.k {
            write!(s, "{c}").unwrap();
            for v in self.centroid(c) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads [`ClusterModel::write_centroids`] output. Inertia is not stored
    /// and comes back as 0 with an empty history.
    pub fn read_centroids(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |offset: usize, message: String| Error::Parse {
            path: path.to_owned(),
            offset: offset as u64,
            message,
        };
        let mut offset = 0;
        let mut dim = None;
        let mut centroids = Vec::new();
        let mut k = 0;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len();
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            let Some(d) = dim else {
                if fields.first() != Some(&"cluster") || fields.len() < 2 {
                    return Err(err(at, "expected header `cluster,c0,...`".into()));
                }
                dim = Some(fields.len() - 1);
                continue;
            };
            if fields == [""] {
                continue;
            }
            if fields.len() != d + 1 || fields[0] != k.to_string() {
                return Err(err(at, format!("expected cluster {k} with {d} values")));
            }
            for f in &fields[1..] {
                centroids.push(f.parse::<f64>().map_err(|_| err(at, format!("bad value {f:?}")))?);
            }
            k += 1;
        }
        let dim = dim.ok_or_else(|| err(0, "empty file".into()))?;
        if k == 0 {
            return Err(err(offset, "no centroids".into()));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            inertia: 0.0,
            inertia_history: Vec::new(),
        })
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

fn nearest(centroids: &[f64], dim: usize, point: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[f32], n: usize, dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids: Vec<f64> = row(rng.random_range(0..n)).iter().map(|&v| v as f64).collect();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids)).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }
    centroids
}

struct Run {
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    inertia: f64,
    history: Vec<f64>,
}

fn assign(points: &[f32], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_chunks_exact(dim)
        .map(|p| nearest(centroids, dim, p))
        .unzip()
}

fn lloyd(points: &[f32], n: usize, dim: usize, k: usize, max_iters: usize, mut centroids: Vec<f64>) -> Run {
    let (mut assignments, mut dist) = assign(points, dim, &centroids);
    let mut history = vec![dist.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.chunks_exact(dim).zip(&assignments) {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                for d in 0..dim {
                    centroids[c * dim + d] = points[far * dim + d] as f64;
                }
                dist[far] = 0.0;
            }
        }
        let (next, next_dist) = assign(points, dim, &centroids);
        let inertia: f64 = next_dist.iter().sum();
        let prev = *history.last().unwrap();
        debug_assert!(
            inertia <= prev * (1.0 + 1e-9) + 1e-12,
            "k-means inertia rose from {prev} to {inertia}"
        );
        history.push(inertia);
        let changed = next != assignments;
        assignments = next;
        dist = next_dist;
        if !changed {
            break;
        }
    }
    Run {
        centroids,
        assignments,
        inertia: *history.last().unwrap(),
        history,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.
/// `points` is row-major `n × dim`. Returns the model and per-point
/// cluster indices.
pub fn kmeans(points: &[f32], dim: usize, config: &KMeansConfig) -> Result<(ClusterModel, Vec<usize>)> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Dimension(format!(
            "{} values do not form points of dimension {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    let k = config.k;
    if k == 0 || config.restarts == 0 {
        return Err(Error::Config("k and restarts must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Input(format!("{n} points cannot form {k} clusters")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("k-means input contains non-finite values".into()));
    }
    let mut rng = stream(config.seed, streams::KMEANS);
    let mut best: Option<Run> = None;
    for _ in 0..config.restarts {
        let init = plus_plus(points, n, dim, k, &mut rng);
        let run = lloyd(points, n, dim, k, config.max_iters, init);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.expect("restarts >= 1");
    Ok((
        ClusterModel {
            k,
            dim,
            centroids: run.centroids,
            inertia: run.inertia,
            inertia_history: run.history,
        },
        run.assignments,
    ))
}

/// Clusters every pixel of a feature cube.
pub fn kmeans_cube(features: &HyperspectralCube, config: &KMeansConfig) -> Result<(ClusterModel, Vec<usize>)> {
    kmeans(&features.to_pixels(), features.bands(), config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentEntry {
    pub row: usize,
    pub col: usize,
    pub label: usize,
    /// Euclidean distance to the cluster centroid in code space.
    pub distance: f64,
    pub spectrum: Vec<f32>,
}

/// Pseudo-labelled spectra: an equal number per cluster, grouped by
/// cluster and sorted by distance within each group.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentSet {
    pub entries: Vec<ConfidentEntry>,
    pub per_class: usize,
    pub classes: usize,
    pub grid: Arc<WavelengthGrid>,
}

impl ConfidentSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn of_class(&self, class: usize) -> impl Iterator<Item = &ConfidentEntry> {
        self.entries.iter().filter(move |e| e.label == class)
    }

    /// `row,col,pseudo_label,distance,<band values>` with a header line that
    /// names the band wavelengths.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("row,col,pseudo_label,distance");
        for w in self.grid.wavelengths() {
            write!(s, ",{w}").unwrap();
        }
        s.push('\n');
        for e in &self.entries {
            write!(s, "{},{},{},{}", e.row, e.col, e.label, e.distance).unwrap();
            for v in &e.spectrum {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut offset = 0u64;
        let err = |offset: u64, message: String| Error::Parse {
            path: path.to_owned(),
            offset,
            message,
        };
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| err(0, "empty file".into()))?;
        let cols: Vec<&str> = header.trim_end().split(',').collect();
        if cols.len() < 5 || cols[..4] != ["row", "col", "pseudo_label", "distance"] {
            return Err(err(0, "expected header `row,col,pseudo_label,distance,<wavelengths>`".into()));
        }
        let wavelengths = cols[4..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| err(0, format!("bad wavelength {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let grid = Arc::new(WavelengthGrid::new(wavelengths)?);
        offset += header.len() as u64;
        let mut entries = Vec::new();
        for line in lines {
            let at = offset;
            offset += line.len() as u64;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + grid.len() {
                return Err(err(at, format!("expected {} fields, found {}", 4 + grid.len(), f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| err(at, format!("bad integer {s:?}")));
            let spectrum = f[4..]
                .iter()
                .map(|s| s.parse::<f32>().map_err(|_| err(at, format!("bad value {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            entries.push(ConfidentEntry {
                row: int(f[0])?,
                col: int(f[1])?,
                label: int(f[2])?,
                distance: f[3].parse().map_err(|_| err(at, format!("bad distance {:?}", f[3])))?,
                spectrum,
            });
        }
        Self::from_entries(entries, grid)
    }

    /// Validates equal class sizes and restores the canonical order.
    pub fn from_entries(mut entries: Vec<ConfidentEntry>, grid: Arc<WavelengthGrid>) -> Result<Self> {
        let classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut counts = vec![0usize; classes];
        for e in &entries {
            counts[e.label] += 1;
            if e.spectrum.len() != grid.len() {
                return Err(Error::Dimension(format!(
                    "entry ({}, {}) has {} bands; grid has {}",
                    e.row,
                    e.col,
                    e.spectrum.len(),
                    grid.len()
                )));
            }
        }
        let per_class = counts.first().copied().unwrap_or(0);
        if counts.iter().any(|&c| c != per_class) {
            return Err(Error::Label(format!("unequal class sizes {counts:?}")));
        }
        entries.sort_by(|a, b| {
            a.label
                .cmp(&b.label)
                .then(a.distance.total_cmp(&b.distance))
                .then((a.row, a.col).cmp(&(b.row, b.col)))
        });
        Ok(Self {
            entries,
            per_class,
            classes,
            grid,
        })
    }
}

/// The `labels_per_class` members nearest to each centroid, ties broken by
/// (row, col). Pseudo-label = cluster index.
pub fn extract_confident(
    features: &HyperspectralCube,
    spectra: &HyperspectralCube,
    model: &ClusterModel,
    assignments: &[usize],
    labels_per_class: usize,
) -> Result<ConfidentSet> {
    let n = features.pixel_count();
    if spectra.height() != features.height() || spectra.width() != features.width() {
        return Err(Error::Dimension(format!(
            "feature raster {}x{} differs from spectral cube {}x{}",
            features.height(),
            features.width(),
            spectra.height(),
            spectra.width()
        )));
    }
    if assignments.len() != n || features.bands() != model.dim {
        return Err(Error::Dimension(format!(
            "{} assignments / {}-d features for {n} pixels and a {}-d model",
            assignments.len(),
            features.bands(),
            model.dim
        )));
    }
    if labels_per_class == 0 {
        return Err(Error::Config("labels_per_class must be >= 1".into()));
    }
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); model.k];
    let mut code = vec![0.0f32; model.dim];
    for (p, &c) in assignments.iter().enumerate() {
        if c >= model.k {
            return Err(Error::Label(format!("assignment {c} out of range for k = {}", model.k)));
        }
        features.gather_pixels(p, 1, &mut code);
        members[c].push((sq_dist(&code, model.centroid(c)).sqrt(), p));
    }
    let mut entries = Vec::with_capacity(model.k * labels_per_class);
    for (c, list) in members.iter_mut().enumerate() {
        if list.len() < labels_per_class {
            return Err(Error::Extraction {
                cluster: c,
                available: list.len(),
                requested: labels_per_class,
            });
        }
        // pixel index order is (row, col) order
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(distance, p) in &list[..labels_per_class] {
            entries.push(ConfidentEntry {
                row: p / features.width(),
                col: p % features.width(),
                label: c,
                distance,
                spectrum: spectra.pixel_values(p),
            });
        }
    }
    Ok(ConfidentSet {
        entries,
        per_class: labels_per_class,
        classes: model.k,
        grid: spectra.grid().clone(),
    })
}

/// Seeded, stratified, disjoint split into training and validation sets.
pub fn split_train_val(
    set: &ConfidentSet,
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
) -> Result<(ConfidentSet, ConfidentSet)> {
    if train_per_class + val_per_class > set.per_class {
        return Err(Error::Input(format!(
            "split {train_per_class}+{val_per_class} exceeds {} entries per class",
            set.per_class
        )));
    }
    let mut rng = stream(seed, streams::SPLIT);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..set.classes {
        let mut idx: Vec<usize> = (0..set.entries.len()).filter(|&i| set.entries[i].label == c).collect();
        idx.shuffle(&mut rng);
        let mut t = idx[..train_per_class].to_vec();
        let mut v = idx[train_per_class..train_per_class + val_per_class].to_vec();
        t.sort_unstable();
        v.sort_unstable();
        train.extend(t.into_iter().map(|i| set.entries[i].clone()));
        val.extend(v.into_iter().map(|i| set.entries[i].clone()));
    }
    let make = |entries, per_class| ConfidentSet {
        entries,
        per_class,
        classes: set.classes,
        grid: set.grid.clone(),
    };
    Ok((make(train, train_per_class), make(val, val_per_class)))
}
