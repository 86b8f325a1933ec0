//! Per-stage provenance: content hashes of inputs and outputs, seed and timing.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::spectral::Header;

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// `(path, sha256)` of every file read; written as `input = <sha256> <path>`.
    pub inputs: Vec<(PathBuf, String)>,
    /// `(path, sha256)` of every file written.
    pub outputs: Vec<(PathBuf, String)>,
    pub seconds: f64,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, inputs: &[PathBuf], outputs: &[PathBuf], seconds: f64) -> Result<Self> {
        let hash_all = |paths: &[PathBuf]| -> Result<Vec<(PathBuf, String)>> {
            paths.iter().map(|p| Ok((p.clone(), sha256_file(p)?))).collect()
        };
        Ok(Self {
            stage: stage.into(),
            seed,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            seconds,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "stage = {}", self.stage).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "seconds = {:.3}", self.seconds).unwrap();
        for (p, h) in &self.inputs {
            writeln!(s, "input = {h} {}", p.display()).unwrap();
        }
        for (p, h) in &self.outputs {
            writeln!(s, "output = {h} {}", p.display()).unwrap();
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let h = Header::read(path.as_ref())?;
        let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
        for (key, value, offset) in h.entries() {
            let list = match key {
                "input" => &mut inputs,
                "output" => &mut outputs,
                _ => continue,
            };
            let (hash, path) = value
                .split_once(' ')
                .ok_or_else(|| h.error(offset, "expected `<sha256> <path>`"))?;
            list.push((PathBuf::from(path), hash.to_owned()));
        }
        Ok(Self {
            stage: h.value("stage")?,
            seed: h.value("seed")?,
            inputs,
            outputs,
            seconds: h.value("seconds")?,
        })
    }
}
