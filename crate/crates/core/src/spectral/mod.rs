//! Spectral data types and the geometry shared by every stage: wavelength
//! grids, spectra, band-sequential cubes, label rasters, panel calibration,
//! piecewise-linear resampling and the spectral angle.

mod io;

use std::sync::Arc;

pub use io::{read_cube, read_labels, write_cube, write_labels};
pub(crate) use io::{format_list, parse_f64_list, Header};

use crate::error::{Error, Result};

/// Label value marking a pixel without ground truth.
pub const UNLABELLED: u8 = 255;

/// Strictly increasing band-centre wavelengths in nanometres.
#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthGrid {
    wavelengths_nm: Vec<f64>,
}

impl WavelengthGrid {
    pub fn new(wavelengths_nm: Vec<f64>) -> Result<Self> {
        if wavelengths_nm.is_empty() {
            return Err(Error::Input("wavelength grid is empty".into()));
        }
        for (i, &w) in wavelengths_nm.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::Input(format!(
                    "wavelength {i} is {w}; must be finite and > 0"
                )));
            }
            if i > 0 && w <= wavelengths_nm[i - 1] {
                return Err(Error::Input(format!(
                    "wavelengths not strictly increasing at index {i} ({} then {w})",
                    wavelengths_nm[i - 1]
                )));
            }
        }
        Ok(Self { wavelengths_nm })
    }

    /// `count` evenly spaced bands from `first_nm` to `last_nm` inclusive.
    pub fn linspace(first_nm: f64, last_nm: f64, count: usize) -> Result<Self> {
        if count == 1 {
            return Self::new(vec![first_nm]);
        }
        if count == 0 {
            return Err(Error::Input("band count must be >= 1".into()));
        }
        let step = (last_nm - first_nm) / (count - 1) as f64;
        let mut w: Vec<f64> = (0..count).map(|i| first_nm + step * i as f64).collect();
        w[count - 1] = last_nm;
        Self::new(w)
    }

    /// Pseudo-wavelengths `1, 2, ..., count` used for feature rasters.
    pub fn index(count: usize) -> Result<Self> {
        Self::new((1..=count).map(|i| i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths_nm.is_empty()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn first(&self) -> f64 {
        self.wavelengths_nm[0]
    }

    pub fn last(&self) -> f64 {
        self.wavelengths_nm[self.wavelengths_nm.len() - 1]
    }
}

/// A single pixel spectrum bound to its wavelength grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f32>,
    grid: Arc<WavelengthGrid>,
}

impl Spectrum {
    pub fn new(values: Vec<f32>, grid: Arc<WavelengthGrid>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "spectrum has {} values but its grid has {} bands",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// An `height × width × bands` reflectance raster stored band-sequentially:
/// `data[band * height * width + row * width + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperspectralCube {
    height: usize,
    width: usize,
    grid: Arc<WavelengthGrid>,
    data: Vec<f32>,
}

impl HyperspectralCube {
    pub fn new(height: usize, width: usize, grid: Arc<WavelengthGrid>, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * grid.len();
        if height == 0 || width == 0 {
            return Err(Error::Dimension("cube height and width must be >= 1".into()));
        }
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "cube data has {} values; {height}x{width}x{} needs {expected}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self {
            height,
            width,
            grid,
            data,
        })
    }

    /// Builds a cube from pixel-interleaved values (`pixel * bands + band`).
    pub fn from_pixels(
        height: usize,
        width: usize,
        grid: Arc<WavelengthGrid>,
        pixels: &[f32],
    ) -> Result<Self> {
        let bands = grid.len();
        let n = height * width;
        if pixels.len() != n * bands {
            return Err(Error::Dimension(format!(
                "{} pixel values cannot fill {height}x{width}x{bands}",
                pixels.len()
            )));
        }
        let mut data = vec![0.0f32; n * bands];
        for (p, px) in pixels.chunks_exact(bands).enumerate() {
            for (b, &v) in px.iter().enumerate() {
                data[b * n + p] = v;
            }
        }
        Self::new(height, width, grid, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.grid.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn grid(&self) -> &Arc<WavelengthGrid> {
        &self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.pixel_count();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.pixel_count() + row * self.width + col]
    }

    /// Spectrum of the pixel with flat index `row * width + col`.
    pub fn pixel_values(&self, index: usize) -> Vec<f32> {
        let n = self.pixel_count();
        (0..self.bands()).map(|b| self.data[b * n + index]).collect()
    }

    pub fn spectrum(&self, row: usize, col: usize) -> Spectrum {
        Spectrum {
            values: self.pixel_values(row * self.width + col),
            grid: self.grid.clone(),
        }
    }

    /// Copies pixels `start..start + count` into `out` in pixel-interleaved
    /// order (`count × bands`).
    pub fn gather_pixels(&self, start: usize, count: usize, out: &mut [f32]) {
        let n = self.pixel_count();
        let bands = self.bands();
        debug_assert!(out.len() >= count * bands);
        for b in 0..bands {
            let src = &self.data[b * n + start..b * n + start + count];
            for (i, &v) in src.iter().enumerate() {
                out[i * bands + b] = v;
            }
        }
    }

    /// All pixels in pixel-interleaved order.
    pub fn to_pixels(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        self.gather_pixels(0, self.pixel_count(), &mut out);
        out
    }
}

/// Per-pixel class indices; `UNLABELLED` marks pixels without a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "label raster has {} values; {height}x{width} needs {}",
                labels.len(),
                height * width
            )));
        }
        if classes == 0 || classes >= UNLABELLED as usize {
            return Err(Error::Label(format!("class count {classes} must be in 1..255")));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != UNLABELLED && l as usize >= classes)
        {
            return Err(Error::Label(format!(
                "pixel {i} has class {l} but only {classes} classes are declared"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn matches_cube(&self, cube: &HyperspectralCube) -> bool {
        self.height == cube.height() && self.width == cube.width()
    }
}

/// Rectangle of the calibration panel in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelRegion {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Converts raw radiance to apparent reflectance against a panel of known
/// reflectance. Negative results are clamped to zero; values above one are kept.
pub fn calibrate(
    raw: &HyperspectralCube,
    panel: PanelRegion,
    panel_reflectance: f64,
) -> Result<HyperspectralCube> {
    if panel.rows == 0
        || panel.cols == 0
        || panel.row + panel.rows > raw.height()
        || panel.col + panel.cols > raw.width()
    {
        return Err(Error::Input(format!(
            "panel region {panel:?} does not lie inside the {}x{} raster",
            raw.height(),
            raw.width()
        )));
    }
    if !(panel_reflectance.is_finite() && panel_reflectance > 0.0) {
        return Err(Error::Input(format!(
            "panel reflectance {panel_reflectance} must be > 0"
        )));
    }
    let n = raw.pixel_count();
    let mut data = Vec::with_capacity(raw.data().len());
    for b in 0..raw.bands() {
        let band = raw.band(b);
        let mut sum = 0.0f64;
        for r in panel.row..panel.row + panel.rows {
            let start = r * raw.width() + panel.col;
            sum += band[start..start + panel.cols]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mean = sum / (panel.rows * panel.cols) as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::Calibration {
                band: b,
                wavelength_nm: raw.grid().wavelengths()[b],
                value: mean,
            });
        }
        let gain = panel_reflectance / mean;
        data.extend(band.iter().map(|&v| (v as f64 * gain).max(0.0) as f32));
        debug_assert_eq!(data.len(), (b + 1) * n);
    }
    HyperspectralCube::new(raw.height(), raw.width(), raw.grid().clone(), data)
}

/// Precomputed piecewise-linear interpolation from one grid onto another.
#[derive(Debug, Clone)]
pub struct Resampler {
    source_len: usize,
    target: Arc<WavelengthGrid>,
    // (lower source index, weight of the upper neighbour)
    taps: Vec<(usize, f64)>,
    identity: bool,
}

impl Resampler {
    pub fn new(source: &WavelengthGrid, target: Arc<WavelengthGrid>) -> Result<Self> {
        let src = source.wavelengths();
        let identity = source == target.as_ref();
        let mut taps = Vec::with_capacity(target.len());
        for &w in target.wavelengths() {
            if w < source.first() || w > source.last() {
                return Err(Error::OutOfRange {
                    wavelength_nm: w,
                    min_nm: source.first(),
                    max_nm: source.last(),
                });
            }
            if src.len() == 1 {
                taps.push((0, 0.0));
                continue;
            }
            // first index whose wavelength is > w, clamped so i + 1 is valid
            let upper = src.partition_point(|&s| s <= w).clamp(1, src.len() - 1);
            let lo = upper - 1;
            let t = (w - src[lo]) / (src[upper] - src[lo]);
            taps.push((lo, t));
        }
        Ok(Self {
            source_len: src.len(),
            target,
            taps,
            identity,
        })
    }

    pub fn target(&self) -> &Arc<WavelengthGrid> {
        &self.target
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    /// Resamples `values` (on the source grid) into `out` (on the target grid).
    pub fn apply_into(&self, values: &[f32], out: &mut [f32]) {
        debug_assert_eq!(values.len(), self.source_len);
        if self.identity {
            out.copy_from_slice(values);
            return;
        }
        for (o, &(lo, t)) in out.iter_mut().zip(&self.taps) {
            *o = if t == 0.0 {
                values[lo]
            } else if t == 1.0 {
                values[lo + 1]
            } else {
                (values[lo] as f64 * (1.0 - t) + values[lo + 1] as f64 * t) as f32
            };
        }
    }
}

/// Linear interpolation of `spectrum` at every wavelength of `target`.
pub fn resample_spectrum(spectrum: &Spectrum, target: Arc<WavelengthGrid>) -> Result<Spectrum> {
    let resampler = Resampler::new(spectrum.grid(), target.clone())?;
    let mut values = vec![0.0f32; target.len()];
    resampler.apply_into(spectrum.values(), &mut values);
    Spectrum::new(values, target)
}

/// Subtracts the band mean in place.
pub fn mean_offset_in_place(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
    for v in values.iter_mut() {
        *v = (*v as f64 - mean) as f32;
    }
}

/// Shifts a spectrum so its mean is zero.
pub fn mean_offset(spectrum: &Spectrum) -> Spectrum {
    let mut values = spectrum.values().to_vec();
    mean_offset_in_place(&mut values);
    Spectrum {
        values,
        grid: spectrum.grid().clone(),
    }
}

fn norm2<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into() * x.into()).sum::<f64>().sqrt()
}

/// Angle in radians between two spectra, in `[0, π]`.
///
/// Evaluated as `2·atan2(|â − b̂|, |â + b̂|)` on the unit vectors, which is the
/// arccosine of the cosine similarity without the loss of precision arccos
/// suffers next to 0 and π.
pub fn spectral_angle<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "spectral angle of vectors with {} and {} bands",
            a.len(),
            b.len()
        )));
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Degenerate(format!(
            "spectral angle needs non-zero finite vectors (norms {na}, {nb})"
        )));
    }
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (u, v) = (x.into() / na, y.into() / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    Ok(angle.clamp(0.0, std::f64::consts::PI))
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine similarity of vectors with {} and {} bands",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn grid(w: &[f64]) -> Arc<WavelengthGrid> {
        Arc::new(WavelengthGrid::new(w.to_vec()).unwrap())
    }

    fn spectrum(v: &[f32], w: &[f64]) -> Spectrum {
        Spectrum::new(v.to_vec(), grid(w)).unwrap()
    }

    #[test]
    fn grid_rejects_non_increasing_and_non_positive() {
        assert!(WavelengthGrid::new(vec![400.0, 400.0]).is_err());
        assert!(WavelengthGrid::new(vec![0.0, 1.0]).is_err());
        assert!(WavelengthGrid::new(vec![f64::NAN]).is_err());
        assert!(WavelengthGrid::new(vec![]).is_err());
        let g = WavelengthGrid::linspace(430.0, 860.0, 216).unwrap();
        assert_eq!(g.len(), 216);
        assert_eq!(g.last(), 860.0);
        assert!((g.wavelengths()[1] - 432.0).abs() < 1e-12);
    }

    fn uniform_cube(h: usize, w: usize, bands: usize, value: impl Fn(usize, usize, usize) -> f32) -> HyperspectralCube {
        let g = Arc::new(WavelengthGrid::linspace(400.0, 970.0, bands).unwrap());
        let mut data = Vec::new();
        for b in 0..bands {
            for r in 0..h {
                for c in 0..w {
                    data.push(value(r, c, b));
                }
            }
        }
        HyperspectralCube::new(h, w, g, data).unwrap()
    }

    #[test]
    fn calibrate_panel_reproduces_its_reflectance() {
        let cube = uniform_cube(4, 4, 3, |_, _, b| 10.0 + b as f32);
        let panel = PanelRegion { row: 0, col: 0, rows: 2, cols: 2 };
        let out = calibrate(&cube, panel, 0.99).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.99).abs() < 1e-6));
    }

    #[test]
    fn calibrate_zero_and_double_pixels() {
        // panel occupies row 0; row 1 is dark; row 2 is twice the panel
        let cube = uniform_cube(3, 2, 4, |r, _, b| match r {
            0 => 5.0 + b as f32,
            1 => 0.0,
            _ => 2.0 * (5.0 + b as f32),
        });
        let out = calibrate(&cube, PanelRegion { row: 0, col: 0, rows: 1, cols: 2 }, 0.99).unwrap();
        for b in 0..4 {
            assert_eq!(out.value(1, 0, b), 0.0);
            assert!((out.value(2, 1, b) - 1.98).abs() < 1e-6);
        }
    }

    #[test]
    fn calibrate_clamps_negative_keeps_super_panel() {
        let cube = uniform_cube(1, 3, 2, |_, c, _| [1.0, -0.5, 3.0][c]);
        let out = calibrate(&cube, PanelRegion { row: 0, col: 0, rows: 1, cols: 1 }, 0.5).unwrap();
        assert_eq!(out.value(0, 1, 0), 0.0);
        assert!((out.value(0, 2, 1) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn calibrate_names_dark_band() {
        let cube = uniform_cube(2, 2, 3, |_, _, b| if b == 1 { 0.0 } else { 1.0 });
        let err = calibrate(&cube, PanelRegion { row: 0, col: 0, rows: 2, cols: 2 }, 0.99).unwrap_err();
        match err {
            Error::Calibration { band, .. } => assert_eq!(band, 1),
            other => panic!("unexpected {other}"),
        }
        let err = calibrate(&cube, PanelRegion { row: 1, col: 1, rows: 2, cols: 1 }, 0.99);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn calibration_scales_linearly_in_pixel_radiance() {
        let base = uniform_cube(2, 3, 5, |r, c, b| 1.0 + (r * 7 + c * 3 + b) as f32 * 0.25);
        let panel = PanelRegion { row: 0, col: 0, rows: 1, cols: 1 };
        let c = 3.0f32;
        let scaled = uniform_cube(2, 3, 5, |r, cc, b| {
            let v = 1.0 + (r * 7 + cc * 3 + b) as f32 * 0.25;
            if (r, cc) == (0, 0) { v } else { c * v }
        });
        let a = calibrate(&base, panel, 0.99).unwrap();
        let s = calibrate(&scaled, panel, 0.99).unwrap();
        for b in 0..5 {
            for r in 0..2 {
                for col in 0..3 {
                    if (r, col) == (0, 0) {
                        continue;
                    }
                    let want = c * a.value(r, col, b);
                    assert!((s.value(r, col, b) - want).abs() <= 1e-5 * want.abs());
                }
            }
        }
    }

    #[test]
    fn resample_examples() {
        let s = spectrum(&[0.0, 2.0], &[400.0, 404.0]);
        let out = resample_spectrum(&s, grid(&[402.0])).unwrap();
        assert_eq!(out.values(), &[1.0]);

        let s = spectrum(&[1.0, 3.0, 5.0], &[400.0, 402.0, 404.0]);
        let out = resample_spectrum(&s, grid(&[401.0, 403.0])).unwrap();
        assert_eq!(out.values(), &[2.0, 4.0]);

        let same = resample_spectrum(&s, s.grid().clone()).unwrap();
        assert_eq!(same, s);
    }

    #[test]
    fn resample_rejects_extrapolation() {
        let s = spectrum(&[1.0, 3.0], &[400.0, 402.0]);
        assert!(matches!(
            resample_spectrum(&s, grid(&[399.0, 401.0])),
            Err(Error::OutOfRange { .. })
        ));
        assert!(resample_spectrum(&s, grid(&[402.5])).is_err());
    }

    #[test]
    fn mean_offset_examples() {
        let w = [1.0, 2.0, 3.0];
        assert_eq!(mean_offset(&spectrum(&[1.0, 2.0, 3.0], &w)).values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(mean_offset(&spectrum(&[0.0; 3], &w)).values(), &[0.0; 3]);
        assert_eq!(
            mean_offset(&spectrum(&[5.0; 4], &[1.0, 2.0, 3.0, 4.0])).values(),
            &[0.0; 4]
        );
    }

    #[test]
    fn spectral_angle_examples() {
        assert_eq!(spectral_angle(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((spectral_angle(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!(spectral_angle(&[1.0f64, 1.0], &[3.0, 3.0]).unwrap() < 1e-15);
        assert!((spectral_angle(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap() - FRAC_PI_4).abs() < 1e-15);
        assert!((spectral_angle(&[1.0f64, 0.0], &[-1.0, 0.0]).unwrap() - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn spectral_angle_errors() {
        assert!(matches!(spectral_angle(&[0.0f64, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(matches!(spectral_angle(&[1.0f64], &[1.0, 0.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn cube_pixel_access_round_trips_interleave() {
        let cube = uniform_cube(2, 3, 4, |r, c, b| (r * 100 + c * 10 + b) as f32);
        assert_eq!(cube.pixel_values(4), vec![110.0, 111.0, 112.0, 113.0]);
        let back = HyperspectralCube::from_pixels(2, 3, cube.grid().clone(), &cube.to_pixels()).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn label_raster_validates_classes() {
        assert!(LabelRaster::new(1, 2, 3, vec![0, 3]).is_err());
        assert!(LabelRaster::new(1, 2, 3, vec![2, UNLABELLED]).is_ok());
        assert!(LabelRaster::new(1, 3, 3, vec![0, 1]).is_err());
    }
}
