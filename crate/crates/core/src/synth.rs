//! Seeded synthetic mine-face scenes with ground truth.
//!
//! A scene is a sky band above a rock face made of two interleaved rock
//! classes. Shadow blobs on the face are lit by skylight only; a
//! physically-flavoured truth atmosphere (extinguished direct beam plus
//! Rayleigh and aerosol skylight) sets the shadow colour.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::illumination::Atmosphere;
use crate::rng::{stream, streams};
use crate::spectral::{HyperspectralCube, LabelRaster, WavelengthGrid};

pub const ORE: u8 = 0;
pub const SHALE: u8 = 1;
pub const SKY: u8 = 2;

/// Default sensor grid: 220 bands over 400–970 nm.
pub fn sensor_grid() -> Arc<WavelengthGrid> {
    Arc::new(WavelengthGrid::linspace(400.0, 970.0, 220).expect("static grid"))
}

fn gauss(x: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((x - centre) / width).powi(2)).exp()
}

/// Iron-oxide-like ore: dark blue, steep red edge, broad absorption near 900 nm.
pub fn ore_reflectance(nm: f64) -> f64 {
    let edge = 1.0 / (1.0 + (-(nm - 585.0) / 28.0).exp());
    0.06 + 0.24 * edge - 0.10 * gauss(nm, 895.0, 65.0) + 0.02 * (nm - 400.0) / 570.0
}

/// Shale-like waste: bright, nearly flat, slowly rising.
pub fn shale_reflectance(nm: f64) -> f64 {
    let x = (nm - 400.0) / 570.0;
    0.17 + 0.09 * x + 0.015 * x * x - 0.012 * gauss(nm, 680.0, 60.0)
}

/// Calibrated sky: near zero with a Rayleigh-like fall to the red.
pub fn sky_reflectance(nm: f64) -> f64 {
    0.003 * (nm / 400.0).powi(-4)
}

/// The three default endmembers (ore, shale, sky) sampled on `grid`.
pub fn default_endmembers(grid: &WavelengthGrid) -> Vec<Vec<f64>> {
    [ore_reflectance, shale_reflectance, sky_reflectance]
        .iter()
        .map(|f| grid.wavelengths().iter().map(|&w| f(w)).collect())
        .collect()
}

/// Truth illumination: a 5800 K solar spectrum attenuated along `airmass`
/// for the direct beam, and scattered by Rayleigh (`λ^-4`) and aerosol
/// (`λ^-angstrom`) optical depths for the skylight. Depths are at 550 nm.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthAtmosphere {
    pub airmass: f64,
    pub rayleigh_depth: f64,
    pub aerosol_depth: f64,
    pub angstrom: f64,
    pub rayleigh_sky: f64,
    pub aerosol_sky: f64,
}

impl Default for TruthAtmosphere {
    fn default() -> Self {
        Self::morning()
    }
}

impl TruthAtmosphere {
    pub fn morning() -> Self {
        Self {
            airmass: 1.0,
            rayleigh_depth: 0.1,
            aerosol_depth: 0.2,
            angstrom: 1.0,
            rayleigh_sky: 0.02,
            aerosol_sky: 0.45,
        }
    }

    /// A hazier, lower-sun variant of [`TruthAtmosphere::morning`].
    pub fn afternoon() -> Self {
        Self {
            airmass: 1.2,
            rayleigh_depth: 0.1,
            aerosol_depth: 0.14,
            angstrom: 0.8,
            rayleigh_sky: 0.03,
            aerosol_sky: 0.6,
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            self.airmass,
            self.rayleigh_depth,
            self.aerosol_depth,
            self.angstrom,
            self.rayleigh_sky,
            self.aerosol_sky,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("truth atmosphere needs finite non-negative parameters: {self:?}")));
        }
        if self.rayleigh_sky * self.rayleigh_depth + self.aerosol_sky * self.aerosol_depth <= 0.0 {
            return Err(Error::Config("truth atmosphere has no skylight".into()));
        }
        Ok(())
    }

    pub fn on(&self, grid: &Arc<WavelengthGrid>) -> Result<Atmosphere> {
        self.validate()?;
        let (mut sun, mut sky) = (Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len()));
        for &nm in grid.wavelengths() {
            let x = nm / 550.0;
            let tau_r = self.rayleigh_depth * x.powi(-4);
            let tau_a = self.aerosol_depth * x.powf(-self.angstrom);
            let solar = planck(nm, 5800.0);
            sun.push(solar * (-self.airmass * (tau_r + tau_a)).exp());
            sky.push(solar * (self.rayleigh_sky * tau_r + self.aerosol_sky * tau_a));
        }
        Atmosphere::new(sun, sky, grid.clone())
    }
}

/// Blackbody spectral radiance up to a constant factor.
fn planck(nm: f64, kelvin: f64) -> f64 {
    let um = nm * 1e-3;
    let c2 = 14_387.77; // hc/k in µm·K
    um.powi(-5) / ((c2 / (um * kelvin)).exp() - 1.0)
}

/// Shadow blob placement.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowSpec {
    /// Target fraction of rock-face pixels inside a blob.
    pub coverage: f64,
    /// Blob radius range as a fraction of `min(height, width)`.
    pub radius: (f64, f64),
    /// Half-width in pixels of the smooth sun/shadow transition; 0 gives hard edges.
    pub feather: f64,
    /// Sun visibility at blob centres.
    pub gamma_min: f64,
}

impl Default for ShadowSpec {
    fn default() -> Self {
        Self {
            coverage: 0.3,
            radius: (0.03, 0.1),
            feather: 0.0,
            gamma_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub grid: Arc<WavelengthGrid>,
    /// Per-class reflectance on `grid`; the label of class `i` is `i`.
    pub endmembers: Vec<Vec<f64>>,
    /// Class occupying the top of the image, unshadowed; `None` for a face-only scene.
    pub sky_class: Option<u8>,
    /// Mean skyline depth as a fraction of the height.
    pub sky_fraction: f64,
    /// Amplitude of the per-pixel smooth multiplicative spectral perturbation.
    pub variability: f64,
    /// Range of the spatially smooth brightness factor on the face.
    pub brightness: (f64, f64),
    pub shadow: ShadowSpec,
    pub noise_sigma: f64,
    pub sky_noise_sigma: f64,
    pub atmosphere: TruthAtmosphere,
    /// Seeds the class layout and per-pixel variability; [`generate_scene`]'s
    /// own seed drives shadows and noise.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let grid = sensor_grid();
        Self {
            height: 128,
            width: 256,
            endmembers: default_endmembers(&grid),
            grid,
            sky_class: Some(SKY),
            sky_fraction: 0.15,
            variability: 0.05,
            brightness: (0.8, 1.0),
            shadow: ShadowSpec::default(),
            noise_sigma: 0.001,
            sky_noise_sigma: 0.0002,
            atmosphere: TruthAtmosphere::default(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.endmembers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("scene dimensions must be >= 1".into());
        }
        if self.endmembers.len() < 2 || self.endmembers.len() > 254 {
            return bad(format!("scene needs 2..=254 classes, got {}", self.endmembers.len()));
        }
        for (c, e) in self.endmembers.iter().enumerate() {
            if e.len() != self.grid.len() {
                return bad(format!("endmember {c} has {} values for {} bands", e.len(), self.grid.len()));
            }
            if e.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("endmember {c} has negative or non-finite reflectance"));
            }
        }
        if let Some(sky) = self.sky_class {
            if sky as usize >= self.classes() {
                return bad(format!("sky class {sky} out of range"));
            }
            if self.classes() < 3 {
                return bad("a scene with sky needs at least two face classes".into());
            }
        }
        if !(0.0..=1.0).contains(&self.shadow.coverage) {
            return bad(format!("shadow coverage {} outside [0, 1]", self.shadow.coverage));
        }
        if !(0.0..=1.0).contains(&self.shadow.gamma_min) {
            return bad(format!("gamma_min {} outside [0, 1]", self.shadow.gamma_min));
        }
        let (rlo, rhi) = self.shadow.radius;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return bad(format!("shadow radius range ({rlo}, {rhi}) invalid"));
        }
        let (blo, bhi) = self.brightness;
        if !(blo > 0.0 && blo <= bhi && bhi.is_finite()) {
            return bad(format!("brightness range ({blo}, {bhi}) invalid"));
        }
        let nonneg = [
            ("sky_fraction", self.sky_fraction),
            ("variability", self.variability),
            ("noise_sigma", self.noise_sigma),
            ("sky_noise_sigma", self.sky_noise_sigma),
            ("feather", self.shadow.feather),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.sky_fraction >= 1.0 {
            return bad("sky_fraction must be < 1".into());
        }
        self.atmosphere.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cube: HyperspectralCube,
    pub labels: LabelRaster,
    /// Pixels inside a shadow blob.
    pub shadow_mask: Vec<bool>,
    /// Per-pixel sun visibility used for relighting.
    pub gamma: Vec<f32>,
    /// Noise-free, unshadowed reflectance (pixel-interleaved); what a fully
    /// sunlit capture of the same scene would record.
    pub sunlit: Vec<f32>,
    pub sky_class: Option<u8>,
}

impl Scene {
    pub fn shadow_fraction(&self) -> f64 {
        let face = self.face_mask();
        let total = face.iter().filter(|&&f| f).count();
        let inside = face.iter().zip(&self.shadow_mask).filter(|(&f, &s)| f && s).count();
        inside as f64 / total.max(1) as f64
    }

    /// Pixels that are not sky.
    pub fn face_mask(&self) -> Vec<bool> {
        self.labels.labels().iter().map(|&l| Some(l) != self.sky_class).collect()
    }
}

/// Sum of random plane waves, roughly in `[-1, 1]`.
struct WaveField {
    waves: Vec<(f64, f64, f64)>,
}

impl WaveField {
    fn new(rng: &mut impl Rng, count: usize, scale: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let wavelength = scale * rng.random_range(0.3..1.0);
                let f = 2.0 * PI / wavelength;
                (f * angle.cos(), f * angle.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, row: f64, col: f64) -> f64 {
        let n = self.waves.len().max(1) as f64;
        self.waves.iter().map(|(fx, fy, p)| (fx * col + fy * row + p).cos()).sum::<f64>() / n.sqrt()
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    if edge1 <= edge0 {
        return if x < edge0 { 0.0 } else { 1.0 };
    }
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn layout(spec: &SceneSpec) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, streams::LAYOUT);
    let min_dim = h.min(w) as f64;
    let field = WaveField::new(&mut rng, 5, min_dim);
    let skyline: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.04) * h as f64,
                2.0 * PI / (w as f64 * rng.random_range(0.15..0.8)),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let face_classes: Vec<u8> = (0..spec.classes() as u8).filter(|&c| Some(c) != spec.sky_class).collect();

    let mut labels = vec![0u8; h * w];
    let mut face_values = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if let Some(sky) = spec.sky_class {
                let depth = spec.sky_fraction * h as f64
                    + skyline.iter().map(|(a, f, p)| a * (f * c as f64 + p).sin()).sum::<f64>();
                if (r as f64) < depth {
                    labels[r * w + c] = sky;
                    continue;
                }
            }
            face_values.push((field.at(r as f64, c as f64), r * w + c));
        }
    }
    // Face classes split the field at its quantiles, so they cover equal areas.
    face_values.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = face_values.len();
    for (rank, &(_, idx)) in face_values.iter().enumerate() {
        labels[idx] = face_classes[rank * face_classes.len() / n.max(1)];
    }
    labels
}

/// Signed distance in pixels to the nearest blob edge (negative inside),
/// for blobs placed on face pixels until `coverage` of the face is inside one.
fn shadow_distance(spec: &SceneSpec, labels: &[u8], rng: &mut impl Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut dist = vec![f64::INFINITY; h * w];
    let face: Vec<usize> = (0..h * w).filter(|&i| Some(labels[i]) != spec.sky_class).collect();
    if face.is_empty() || spec.shadow.coverage <= 0.0 {
        return dist;
    }
    let target = (spec.shadow.coverage * face.len() as f64).round() as usize;
    let min_dim = h.min(w) as f64;
    let reach = spec.shadow.feather.ceil() + 1.0;
    let mut covered = 0usize;
    // Bounded so a coverage of 1 on a ragged face cannot loop forever.
    for _ in 0..100_000 {
        if covered >= target {
            break;
        }
        let centre = face[rng.random_range(0..face.len())];
        let (cr, cc) = ((centre / w) as f64, (centre % w) as f64);
        let radius = rng.random_range(spec.shadow.radius.0..=spec.shadow.radius.1) * min_dim;
        let r0 = (cr - radius - reach).floor().max(0.0) as usize;
        let r1 = ((cr + radius + reach).ceil() as usize).min(h - 1);
        let c0 = (cc - radius - reach).floor().max(0.0) as usize;
        let c1 = ((cc + radius + reach).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let i = r * w + c;
                let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt() - radius;
                if d < dist[i] {
                    let is_face = Some(labels[i]) != spec.sky_class;
                    if is_face && d < 0.0 && dist[i] >= 0.0 {
                        covered += 1;
                    }
                    dist[i] = d;
                }
            }
        }
    }
    dist
}

/// Renders a scene. `seed` draws the shadow blobs and sensor noise; the class
/// layout and per-pixel material variability come from `spec.seed`, so two
/// calls with the same spec and different seeds or atmospheres show the same
/// rocks under different light.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w, bands) = (spec.height, spec.width, spec.grid.len());
    let n = h * w;
    let labels = layout(spec);

    let mut layout_rng = stream(spec.seed, streams::VARIABILITY);
    let brightness = WaveField::new(&mut layout_rng, 4, h.min(w) as f64 * 1.5);
    let (blo, bhi) = spec.brightness;
    let basis: Vec<(f64, f64)> = (0..bands)
        .map(|b| {
            let x = if bands > 1 { 2.0 * b as f64 / (bands - 1) as f64 - 1.0 } else { 0.0 };
            (x, 1.5 * x * x - 0.5)
        })
        .collect();

    let mut sunlit = vec![0.0f32; n * bands];
    for p in 0..n {
        let class = labels[p] as usize;
        let is_sky = Some(labels[p]) == spec.sky_class;
        let coeffs: [f64; 3] = std::array::from_fn(|_| layout_rng.random_range(-1.0..=1.0));
        let scale = if is_sky {
            1.0
        } else {
            let t = 0.5 * (1.0 + brightness.at((p / w) as f64, (p % w) as f64).clamp(-1.0, 1.0));
            blo + (bhi - blo) * t
        };
        let px = &mut sunlit[p * bands..(p + 1) * bands];
        for (b, v) in px.iter_mut().enumerate() {
            let (x1, x2) = basis[b];
            let perturb = spec.variability * (coeffs[0] + coeffs[1] * x1 + coeffs[2] * x2) / 3.0;
            *v = (spec.endmembers[class][b] * scale * (1.0 + perturb)).max(0.0) as f32;
        }
    }

    let mut shadow_rng = stream(seed, streams::SHADOW);
    let dist = shadow_distance(spec, &labels, &mut shadow_rng);
    let g0 = spec.shadow.gamma_min;
    let is_face = |p: usize| Some(labels[p]) != spec.sky_class;
    let gamma: Vec<f32> = dist
        .iter()
        .enumerate()
        .map(|(p, &d)| {
            if is_face(p) {
                (g0 + (1.0 - g0) * smoothstep(-spec.shadow.feather, spec.shadow.feather, d)) as f32
            } else {
                1.0
            }
        })
        .collect();
    let shadow_mask: Vec<bool> = dist.iter().enumerate().map(|(p, &d)| is_face(p) && d < 0.0).collect();

    let k = spec.atmosphere.on(&spec.grid)?.shadow_factor();
    let mut noise_rng = stream(seed, streams::NOISE);
    let face_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let sky_noise = Normal::new(0.0, spec.sky_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0.0f32; n * bands];
    for p in 0..n {
        let is_sky = Some(labels[p]) == spec.sky_class;
        let g = gamma[p] as f64;
        let noise = if is_sky { &sky_noise } else { &face_noise };
        for b in 0..bands {
            let lit = sunlit[p * bands + b] as f64 * (g + (1.0 - g) * k[b]);
            let eps = if noise.std_dev() > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            data[b * n + p] = (lit + eps).max(0.0) as f32;
        }
    }

    Ok(Scene {
        cube: HyperspectralCube::new(h, w, spec.grid.clone(), data)?,
        labels: LabelRaster::new(h, w, spec.classes(), labels)?,
        shadow_mask,
        gamma,
        sunlit,
        sky_class: spec.sky_class,
    })
}
