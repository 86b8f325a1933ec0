//! Versioned binary parameter container.
//!
//! ```text
//! magic "OWNN" | version u32 | layer count u32
//! per layer: kind u8, then
//!   0 dense      inputs u32, outputs u32, has_bias u8, weight f32[out·in], bias f32[out]?
//!   1 conv1d     kernel u32, in u32, out u32, stride u32, weight f32[k·in·out], bias f32[out]
//!   2 batchnorm  channels u32, epsilon f64, momentum f64, gamma, beta, running mean, running var (f32[channels] each)
//!   3 relu
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use super::layer::{BatchNorm, Conv1d, Dense, Layer};
use super::network::Sequential;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OWNN";
pub const VERSION: u32 = 1;

const DENSE: u8 = 0;
const CONV1D: u8 = 1;
const BATCHNORM: u8 = 2;
const RELU: u8 = 3;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(net: &Sequential<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                out.push(DENSE);
                put_u32(&mut out, d.inputs);
                put_u32(&mut out, d.outputs);
                out.push(u8::from(!d.bias.is_empty()));
                put_f32s(&mut out, &d.weight);
                put_f32s(&mut out, &d.bias);
            }
            Layer::Conv1d(c) => {
                out.push(CONV1D);
                put_u32(&mut out, c.kernel);
                put_u32(&mut out, c.in_channels);
                put_u32(&mut out, c.out_channels);
                put_u32(&mut out, c.stride);
                put_f32s(&mut out, &c.weight);
                put_f32s(&mut out, &c.bias);
            }
            Layer::BatchNorm(b) => {
                out.push(BATCHNORM);
                put_u32(&mut out, b.channels);
                out.extend_from_slice(&b.epsilon.to_le_bytes());
                out.extend_from_slice(&b.momentum.to_le_bytes());
                put_f32s(&mut out, &b.gamma);
                put_f32s(&mut out, &b.beta);
                put_f32s(&mut out, &b.running_mean);
                put_f32s(&mut out, &b.running_var);
            }
            Layer::Relu => out.push(RELU),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: PathBuf,
}

impl Reader<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated container: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32(what)?;
        if v == 0 {
            self.pos = at;
            return Err(self.error(format!("{what} must be >= 1")));
        }
        Ok(v)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.error("size overflow"))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8], source: impl Into<PathBuf>) -> Result<Sequential<f32>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        source: source.into(),
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.error("not a parameter container (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        r.pos -= 4;
        return Err(r.error(format!("unsupported container version {version} (expected {VERSION})")));
    }
    let count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag_at = r.pos;
        let layer = match r.u8("layer kind")? {
            DENSE => {
                let inputs = r.dim("dense inputs")?;
                let outputs = r.dim("dense outputs")?;
                let has_bias = r.u8("dense bias flag")? != 0;
                let weight = r.f32s(inputs * outputs, "dense weight")?;
                let bias = if has_bias { r.f32s(outputs, "dense bias")? } else { Vec::new() };
                Layer::Dense(Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                })
            }
            CONV1D => {
                let kernel = r.dim("conv kernel")?;
                let in_channels = r.dim("conv input channels")?;
                let out_channels = r.dim("conv output channels")?;
                let stride = r.dim("conv stride")?;
                let weight = r.f32s(kernel * in_channels * out_channels, "conv weight")?;
                let bias = r.f32s(out_channels, "conv bias")?;
                Layer::Conv1d(Conv1d {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    weight,
                    bias,
                })
            }
            BATCHNORM => {
                let channels = r.dim("batchnorm channels")?;
                let epsilon = r.f64("batchnorm epsilon")?;
                let momentum = r.f64("batchnorm momentum")?;
                Layer::BatchNorm(BatchNorm {
                    channels,
                    epsilon,
                    momentum,
                    gamma: r.f32s(channels, "batchnorm gamma")?,
                    beta: r.f32s(channels, "batchnorm beta")?,
                    running_mean: r.f32s(channels, "batchnorm running mean")?,
                    running_var: r.f32s(channels, "batchnorm running variance")?,
                    frozen: false,
                })
            }
            RELU => Layer::Relu,
            other => {
                r.pos = tag_at;
                return Err(r.error(format!("unknown layer kind {other}")));
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Sequential::new(layers))
}

pub fn save(net: &Sequential<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Sequential<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
