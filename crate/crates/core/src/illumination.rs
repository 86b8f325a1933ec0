//! Sun/sky illumination model and shadow relighting.
//!
//! A surface lit by a fraction `gamma` of the direct beam plus all of the
//! diffuse skylight, and calibrated against a fully sunlit panel, has apparent
//! reflectance `s(λ)·(gamma + (1 − gamma)·k(λ))` where
//! `k = E_sky / (E_sun + E_sky)` is the shadow factor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spectral::{format_list, Header, Spectrum, WavelengthGrid};

/// Paired direct-sun and diffuse-sky irradiance curves.
#[derive(Debug, Clone, PartialEq)]
pub struct Atmosphere {
    e_sun: Vec<f64>,
    e_sky: Vec<f64>,
    grid: Arc<WavelengthGrid>,
}

impl Atmosphere {
    pub fn new(e_sun: Vec<f64>, e_sky: Vec<f64>, grid: Arc<WavelengthGrid>) -> Result<Self> {
        if e_sun.len() != grid.len() || e_sky.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "atmosphere curves have {} and {} values for a {}-band grid",
                e_sun.len(),
                e_sky.len(),
                grid.len()
            )));
        }
        for (b, (&sun, &sky)) in e_sun.iter().zip(&e_sky).enumerate() {
            if !(sun.is_finite() && sky.is_finite() && sun >= 0.0 && sky >= 0.0 && sun + sky > 0.0) {
                return Err(Error::Input(format!(
                    "atmosphere band {b}: e_sun {sun}, e_sky {sky}; need finite, >= 0, positive sum"
                )));
            }
        }
        Ok(Self { e_sun, e_sky, grid })
    }

    pub fn e_sun(&self) -> &[f64] {
        &self.e_sun
    }

    pub fn e_sky(&self) -> &[f64] {
        &self.e_sky
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    /// Per-band `E_sky / (E_sun + E_sky)`, always in `(0, 1]` when skylight is present.
    pub fn shadow_factor(&self) -> Vec<f64> {
        self.e_sun
            .iter()
            .zip(&self.e_sky)
            .map(|(&sun, &sky)| sky / (sun + sky))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        writeln!(text, "bands = {}", self.grid.len()).unwrap();
        writeln!(text, "wavelengths = {}", format_list(self.grid.wavelengths())).unwrap();
        writeln!(text, "e_sun = {}", format_list(&self.e_sun)).unwrap();
        writeln!(text, "e_sky = {}", format_list(&self.e_sky)).unwrap();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let header = Header::read(path.as_ref())?;
        let bands = header.usize("bands")?;
        let wl = header.f64_list("wavelengths")?;
        let e_sun = header.f64_list("e_sun")?;
        let e_sky = header.f64_list("e_sky")?;
        if wl.len() != bands {
            let (_, off) = header.required("wavelengths")?;
            return Err(header.error(off, format!("{} wavelengths for {bands} bands", wl.len())));
        }
        Self::new(e_sun, e_sky, Arc::new(WavelengthGrid::new(wl)?))
    }
}

/// Parameter ranges of the candidate-atmosphere sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphereSamplerParams {
    /// Exponent range of the `(λ/λ_ref)^(−bias)` skylight tilt.
    pub blue_bias: (f64, f64),
    /// Broadband `ΣE_sky / ΣE_sun` range.
    pub sky_to_sun_ratio: (f64, f64),
    /// Number of spline control points shaping the sunlight curve.
    pub smoothness: usize,
    pub reference_nm: f64,
    pub seed: u64,
}

impl Default for AtmosphereSamplerParams {
    fn default() -> Self {
        Self {
            blue_bias: (0.5, 2.0),
            sky_to_sun_ratio: (0.05, 0.35),
            smoothness: 6,
            reference_nm: 650.0,
            seed: 0,
        }
    }
}

impl AtmosphereSamplerParams {
    pub fn validate(&self) -> Result<()> {
        let (blo, bhi) = self.blue_bias;
        let (rlo, rhi) = self.sky_to_sun_ratio;
        if !(blo.is_finite() && bhi.is_finite() && blo <= bhi) {
            return Err(Error::Config(format!("blue_bias range {blo}..{bhi} is empty")));
        }
        if !(rlo > 0.0 && rhi <= 1.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "sky_to_sun_ratio range {rlo}..{rhi} must be non-empty and inside (0, 1]"
            )));
        }
        if self.smoothness == 0 {
            return Err(Error::Config("smoothness must be >= 1".into()));
        }
        if !(self.reference_nm > 0.0) {
            return Err(Error::Config("reference_nm must be > 0".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Catmull-Rom interpolation through evenly spaced control values at `t ∈ [0, 1]`.
fn spline(control: &[f64], t: f64) -> f64 {
    let n = control.len();
    if n == 1 {
        return control[0];
    }
    let x = t * (n - 1) as f64;
    let i = (x.floor() as usize).min(n - 2);
    let u = x - i as f64;
    let p = |j: isize| control[j.clamp(0, n as isize - 1) as usize];
    let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
    0.5 * (2.0 * p1
        + (-p0 + p2) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
}

/// Draws one candidate atmosphere on `grid`.
pub fn sample_atmosphere(
    params: &AtmosphereSamplerParams,
    grid: &Arc<WavelengthGrid>,
    rng: &mut impl Rng,
) -> Atmosphere {
    let bias = draw(rng, params.blue_bias);
    let ratio = draw(rng, params.sky_to_sun_ratio);
    let control: Vec<f64> = (0..params.smoothness)
        .map(|_| if params.smoothness == 1 { 1.0 } else { rng.random_range(0.75..1.25) })
        .collect();
    let (first, last) = (grid.first(), grid.last());
    let span = (last - first).max(f64::MIN_POSITIVE);
    let e_sun: Vec<f64> = grid
        .wavelengths()
        .iter()
        .map(|&w| spline(&control, (w - first) / span).max(1e-3))
        .collect();
    let tilted: Vec<f64> = grid
        .wavelengths()
        .iter()
        .zip(&e_sun)
        .map(|(&w, &sun)| sun * (w / params.reference_nm).powf(-bias))
        .collect();
    let scale = ratio * e_sun.iter().sum::<f64>() / tilted.iter().sum::<f64>();
    let e_sky = tilted.iter().map(|&v| v * scale).collect();
    Atmosphere {
        e_sun,
        e_sky,
        grid: grid.clone(),
    }
}

/// Seeded stream of candidate atmospheres on a fixed grid.
#[derive(Debug, Clone)]
pub struct AtmosphereSampler {
    params: AtmosphereSamplerParams,
    grid: Arc<WavelengthGrid>,
    rng: ChaCha8Rng,
}

impl AtmosphereSampler {
    pub fn new(params: AtmosphereSamplerParams, grid: Arc<WavelengthGrid>) -> Result<Self> {
        params.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        Ok(Self { params, grid, rng })
    }

    pub fn params(&self) -> &AtmosphereSamplerParams {
        &self.params
    }

    pub fn sample(&mut self) -> Atmosphere {
        sample_atmosphere(&self.params, &self.grid, &mut self.rng)
    }

    /// Shadow factor of a freshly sampled atmosphere.
    pub fn sample_shadow_factor(&mut self) -> Vec<f64> {
        self.sample().shadow_factor()
    }
}

/// Sun visibility plus the atmosphere that lights the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RelightParams {
    pub gamma: f64,
    pub atmosphere: Atmosphere,
}

/// Scales `values` in place by `gamma + (1 − gamma)·k(λ)`.
pub fn relight_in_place(values: &mut [f32], gamma: f64, shadow_factor: &[f64]) {
    debug_assert_eq!(values.len(), shadow_factor.len());
    for (v, &k) in values.iter_mut().zip(shadow_factor) {
        *v = (*v as f64 * (gamma + (1.0 - gamma) * k)) as f32;
    }
}

/// Relights a spectrum under partial (`0 < gamma < 1`) or full (`gamma = 0`) shadow.
pub fn relight(spectrum: &Spectrum, params: &RelightParams) -> Result<Spectrum> {
    if spectrum.grid() != params.atmosphere.grid() && **spectrum.grid() != **params.atmosphere.grid() {
        return Err(Error::Dimension(format!(
            "spectrum grid ({} bands) differs from atmosphere grid ({} bands)",
            spectrum.grid().len(),
            params.atmosphere.grid().len()
        )));
    }
    if !(0.0..=1.0).contains(&params.gamma) {
        return Err(Error::Input(format!("gamma {} outside [0, 1]", params.gamma)));
    }
    let mut values = spectrum.values().to_vec();
    relight_in_place(&mut values, params.gamma, &params.atmosphere.shadow_factor());
    Spectrum::new(values, spectrum.grid().clone())
}

/// Expands a batch with `n_variants` relit copies of every spectrum.
///
/// Output order is `[s0, s0', …, s1, s1', …]`: each original followed by its
/// variants, so the label of output `i` is the label of input `i / (1 + n_variants)`.
/// Every variant gets its own atmosphere and a gamma drawn from `[0, 1)`.
pub fn augment_batch(
    batch: &[Spectrum],
    sampler: &AtmosphereSamplerParams,
    n_variants: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Spectrum>> {
    sampler.validate()?;
    let mut out = Vec::with_capacity(batch.len() * (1 + n_variants));
    for s in batch {
        out.push(s.clone());
        for _ in 0..n_variants {
            let k = sample_atmosphere(sampler, s.grid(), rng).shadow_factor();
            let gamma: f64 = rng.random();
            let mut values = s.values().to_vec();
            relight_in_place(&mut values, gamma, &k);
            out.push(Spectrum::new(values, s.grid().clone())?);
        }
    }
    Ok(out)
}
