//! Plain-text `key = value` headers paired with raw little-endian data files.
//!
//! Cubes: `samples`, `lines`, `bands`, `interleave = bsq`,
//! `data type = float32`, `byte order = little`, `wavelengths = {...}`.
//! Label rasters: `samples`, `lines`, `classes`, `data type = uint8`; the
//! value 255 marks unlabelled pixels.
//!
//! A header lives next to its data file with `.hdr` appended
//! (`scene.img` + `scene.img.hdr`). Either path may be passed to the readers.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{HyperspectralCube, LabelRaster, WavelengthGrid, UNLABELLED};
use crate::error::{Error, Result};

struct Entry {
    key: String,
    value: String,
    offset: u64,
}

/// Parsed `key = value` header with the byte offset of every entry.
pub(crate) struct Header {
    path: PathBuf,
    entries: Vec<Entry>,
    len: u64,
}

impl Header {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        let mut pending: Option<Entry> = None;
        for line in text.split_inclusive('\n') {
            let line_offset = offset;
            offset += line.len() as u64;
            let trimmed = line.trim();
            if let Some(entry) = pending.as_mut() {
                entry.value.push(' ');
                entry.value.push_str(trimmed);
                if trimmed.contains('}') {
                    entries.push(pending.take().unwrap());
                }
                continue;
            }
            if trimmed.is_empty() || trimmed.starts_with(';') || trimmed == "ENVI" {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    offset: line_offset,
                    message: format!("expected `key = value`, found {trimmed:?}"),
                });
            };
            let entry = Entry {
                key: key.trim().to_ascii_lowercase(),
                value: value.trim().to_owned(),
                offset: line_offset,
            };
            if entry.value.starts_with('{') && !entry.value.contains('}') {
                pending = Some(entry);
            } else {
                entries.push(entry);
            }
        }
        if let Some(entry) = pending {
            return Err(Error::Parse {
                path: path.to_owned(),
                offset: entry.offset,
                message: format!("unterminated `{{` in value of `{}`", entry.key),
            });
        }
        Ok(Self {
            path: path.to_owned(),
            entries,
            len: offset,
        })
    }

    pub fn error(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset,
            message: message.into(),
        }
    }

    pub fn get(&self, key: &str) -> Option<(&str, u64)> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| (e.value.as_str(), e.offset))
    }

    pub fn required(&self, key: &str) -> Result<(&str, u64)> {
        self.get(key)
            .ok_or_else(|| self.error(self.len, format!("missing required key `{key}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let (value, offset) = self.required(key)?;
        value
            .parse::<usize>()
            .map_err(|_| self.error(offset, format!("`{key}` must be a non-negative integer, found {value:?}")))
    }

    /// Any `FromStr` value.
    pub fn value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (value, offset) = self.required(key)?;
        value
            .parse::<T>()
            .map_err(|_| self.error(offset, format!("cannot parse `{key}` value {value:?}")))
    }

    pub fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.value(key).map(Some),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, u64)> {
        self.entries
            .iter()
            .map(|e| (e.key.as_str(), e.value.as_str(), e.offset))
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let (value, offset) = self.required(key)?;
        parse_f64_list(value).map_err(|m| self.error(offset, format!("`{key}`: {m}")))
    }

    pub fn expect(&self, key: &str, wanted: &str) -> Result<()> {
        let (value, offset) = self.required(key)?;
        if value.eq_ignore_ascii_case(wanted) {
            Ok(())
        } else {
            Err(self.error(
                offset,
                format!("unsupported {key} {value:?}; only {wanted:?} is supported"),
            ))
        }
    }
}

pub(crate) fn parse_f64_list(value: &str) -> std::result::Result<Vec<f64>, String> {
    let inner = value
        .trim()
        .strip_prefix('{')
        .and_then(|v| v.strip_suffix('}'))
        .ok_or_else(|| format!("expected a `{{...}}` list, found {value:?}"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>().map_err(|_| format!("bad number {t:?}"))
        })
        .collect()
}

pub(crate) fn format_list(values: &[f64]) -> String {
    let mut s = String::from("{");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        write!(s, "{v}").unwrap();
    }
    s.push('}');
    s
}

/// Splits a user path into (header, data).
fn resolve(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.as_os_str().to_string_lossy();
    match s.strip_suffix(".hdr") {
        Some(data) => (path.to_owned(), PathBuf::from(data)),
        None => (PathBuf::from(format!("{s}.hdr")), path.to_owned()),
    }
}

fn read_exact_len(header: &Header, data_path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Parse {
            path: data_path.to_owned(),
            offset: actual,
            message: format!(
                "data file truncated: ends at byte {actual} but header {} declares {expected} bytes",
                header.path.display()
            ),
        });
    }
    if actual > expected {
        return Err(Error::Parse {
            path: data_path.to_owned(),
            offset: expected,
            message: format!("{} trailing bytes after the declared {expected}", actual - expected),
        });
    }
    Ok(bytes)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperspectralCube> {
    let (header_path, data_path) = resolve(path.as_ref());
    let header = Header::read(&header_path)?;
    let width = header.usize("samples")?;
    let height = header.usize("lines")?;
    let bands = header.usize("bands")?;
    header.expect("interleave", "bsq")?;
    header.expect("data type", "float32")?;
    header.expect("byte order", "little")?;
    if width == 0 || height == 0 || bands == 0 {
        return Err(header.error(0, "samples, lines and bands must all be >= 1"));
    }
    let wavelengths = header.f64_list("wavelengths")?;
    let (_, wl_offset) = header.required("wavelengths")?;
    if wavelengths.len() != bands {
        return Err(header.error(
            wl_offset,
            format!("{} wavelengths listed for {bands} bands", wavelengths.len()),
        ));
    }
    let grid = WavelengthGrid::new(wavelengths).map_err(|e| header.error(wl_offset, e.to_string()))?;
    let expected = (width * height * bands * 4) as u64;
    let bytes = read_exact_len(&header, &data_path, expected)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    HyperspectralCube::new(height, width, Arc::new(grid), data)
}

pub fn write_cube(cube: &HyperspectralCube, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, data_path) = resolve(path.as_ref());
    let header = format!(
        "samples = {}\nlines = {}\nbands = {}\ninterleave = bsq\ndata type = float32\nbyte order = little\nwavelengths = {}\n",
        cube.width(),
        cube.height(),
        cube.bands(),
        format_list(cube.grid().wavelengths())
    );
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    for chunk in cube.data().chunks(1 << 16) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write_all(&bytes).map_err(|e| Error::io(&data_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&data_path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let (header_path, data_path) = resolve(path.as_ref());
    let header = Header::read(&header_path)?;
    let width = header.usize("samples")?;
    let height = header.usize("lines")?;
    let classes = header.usize("classes")?;
    header.expect("data type", "uint8")?;
    let bytes = read_exact_len(&header, &data_path, (width * height) as u64)?;
    if let Some(pos) = bytes
        .iter()
        .position(|&l| l != UNLABELLED && l as usize >= classes)
    {
        return Err(Error::Parse {
            path: data_path,
            offset: pos as u64,
            message: format!("class {} exceeds declared class count {classes}", bytes[pos]),
        });
    }
    LabelRaster::new(height, width, classes, bytes)
}

pub fn write_labels(labels: &LabelRaster, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, data_path) = resolve(path.as_ref());
    let header = format!(
        "samples = {}\nlines = {}\nclasses = {}\ndata type = uint8\nunlabelled = {UNLABELLED}\n",
        labels.width(),
        labels.height(),
        labels.classes()
    );
    fs::write(&header_path, header).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&data_path, labels.labels()).map_err(|e| Error::io(&data_path, e))
}
