//! 8-bit raster output. The format follows the file extension (`.png`,
//! `.pgm`/`.ppm`).

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Min-max normalisation to `0..=255`. A constant (or empty) input maps to
/// mid-gray 128; non-finite values map to 0.
pub fn normalise_to_u8(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    let span = (hi - lo) as f64;
    values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                ((v - lo) as f64 / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

fn dims(height: usize, width: usize, len: usize, channels: usize) -> Result<(u32, u32)> {
    if height * width * channels != len || height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "{len} values cannot fill a {height}x{width} raster with {channels} channel(s)"
        )));
    }
    let conv = |v: usize| u32::try_from(v).map_err(|_| Error::Input(format!("raster side {v} too large")));
    Ok((conv(width)?, conv(height)?))
}

pub fn save_gray(pixels: Vec<u8>, height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = dims(height, width, pixels.len(), 1)?;
    let img = GrayImage::from_raw(w, h, pixels).expect("buffer size checked");
    img.save(path.as_ref())?;
    Ok(())
}

/// Writes interleaved RGB triples.
pub fn save_rgb(pixels: Vec<u8>, height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = dims(height, width, pixels.len(), 3)?;
    let img = RgbImage::from_raw(w, h, pixels).expect("buffer size checked");
    img.save(path.as_ref())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalisation() {
        assert_eq!(normalise_to_u8(&[3.0; 4]), vec![128; 4]);
        assert_eq!(normalise_to_u8(&[0.0, 0.5, 1.0]), vec![0, 128, 255]);
        assert_eq!(normalise_to_u8(&[f32::NAN, 1.0, 2.0]), vec![0, 0, 255]);
    }

    #[test]
    fn rejects_wrong_sizes() {
        let dir = tempfile::tempdir().unwrap();
        assert!(save_gray(vec![0; 5], 2, 3, dir.path().join("x.png")).is_err());
    }
}
