//! Little-endian binary checkpoint.
//!
//! ```text
//! "QFIM" | version u32 | model name | input dims | layer table
//!        | tensor records (name, dims, f32 data)
//!        | observer records (tag, ema_abs_max f32, momentum f32)
//!        | metadata (key, value) string pairs
//! ```
//! Strings are a u32 byte length followed by UTF-8. A loaded model is frozen.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{Geometry, QLayer};
use crate::model::{Layer, ModelGraph};
use crate::quant::RangeObserver;

pub const MAGIC: &[u8; 4] = b"QFIM";
pub const VERSION: u32 = 1;

pub mod keys {
    pub const CONFIG: &str = "config";
    pub const SEED: &str = "seed";
    pub const FAULTS: &str = "faults_per_forward";
    pub const PROTECTED: &str = "protected_sites";
    pub const TRAIN_ACCURACY: &str = "train_accuracy";
    pub const TEST_ACCURACY: &str = "test_accuracy";
    pub const TEST_SAMPLES: &str = "test_samples";
    /// Checkpoint a fine-tuning run started from.
    pub const INIT: &str = "init";
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    /// Ordered key/value metadata.
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(mut model: ModelGraph) -> Self {
        model.freeze();
        Checkpoint {
            model,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.meta(keys::TEST_ACCURACY).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.model.name);
        w.dims(self.model.input_dims());
        let layers = self.model.layers();
        w.u32(layers.len() as u32);
        for l in layers {
            match l {
                Layer::Quant(q) => match q.geometry {
                    Geometry::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        in_h,
                        in_w,
                    } => {
                        w.0.push(0);
                        for v in [in_channels, out_channels, kernel, stride, padding, in_h, in_w] {
                            w.u32(v as u32);
                        }
                    }
                    Geometry::Linear {
                        in_features,
                        out_features,
                    } => {
                        w.0.push(1);
                        w.u32(in_features as u32);
                        w.u32(out_features as u32);
                    }
                },
                Layer::Relu => w.0.push(2),
                Layer::MaxPool2 => w.0.push(3),
                Layer::Dropout { p } => {
                    w.0.push(4);
                    w.f32(*p);
                }
                Layer::Flatten => w.0.push(5),
            }
        }

        let quant: Vec<(usize, &QLayer)> = self.model.quant_layers().collect();
        w.u32(2 * quant.len() as u32);
        for (i, q) in &quant {
            w.str(&format!("{i}.weight"));
            w.dims(&q.geometry.weight_dims());
            q.weight.iter().for_each(|&v| w.f32(v));
            w.str(&format!("{i}.bias"));
            w.dims(&[q.bias.len()]);
            q.bias.iter().for_each(|&v| w.f32(v));
        }
        w.u32(2 * quant.len() as u32);
        for (i, q) in &quant {
            for (tag, o) in [("i8", &q.input_observer), ("o8", &q.output_observer)] {
                w.str(&format!("{i}.{tag}"));
                w.f32(o.ema_abs_max());
                w.f32(o.momentum());
            }
        }
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing QFIM magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let name = r.str()?;
        let input_dims = r.dims()?;
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = r.take(1)?[0];
            let layer = match tag {
                0 => {
                    let mut v = [0usize; 7];
                    for slot in &mut v {
                        *slot = r.u32()? as usize;
                    }
                    let g = Geometry::Conv2d {
                        in_channels: v[0],
                        out_channels: v[1],
                        kernel: v[2],
                        stride: v[3],
                        padding: v[4],
                        in_h: v[5],
                        in_w: v[6],
                    };
                    if v[3] == 0 || v[2] == 0 || v[5] + 2 * v[4] < v[2] || v[6] + 2 * v[4] < v[2] {
                        return Err(Error::Checkpoint(format!("invalid conv geometry {v:?}")));
                    }
                    Layer::Quant(QLayer::new(g, vec![0.0; g.weight_len()], vec![0.0; g.outputs()])?)
                }
                1 => {
                    let g = Geometry::Linear {
                        in_features: r.u32()? as usize,
                        out_features: r.u32()? as usize,
                    };
                    Layer::Quant(QLayer::new(g, vec![0.0; g.weight_len()], vec![0.0; g.outputs()])?)
                }
                2 => Layer::Relu,
                3 => Layer::MaxPool2,
                4 => Layer::Dropout { p: r.f32()? },
                5 => Layer::Flatten,
                t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
            };
            layers.push(layer);
        }
        let mut model = ModelGraph::new(name, input_dims, layers)?;

        let n_tensors = r.u32()? as usize;
        let mut seen = 0;
        for _ in 0..n_tensors {
            let tname = r.str()?;
            let dims = r.dims()?;
            let len: usize = dims.iter().product();
            let data = r.f32s(len)?;
            let (idx, field) = split_tag(&tname)?;
            let q = quant_at(&mut model, idx)?;
            let slot = match field {
                "weight" => &mut q.weight,
                "bias" => &mut q.bias,
                other => return Err(Error::Checkpoint(format!("unknown tensor `{other}`"))),
            };
            if slot.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor {tname} has {len} values, layer expects {}",
                    slot.len()
                )));
            }
            *slot = data;
            seen += 1;
        }
        let n_obs = r.u32()? as usize;
        for _ in 0..n_obs {
            let tag = r.str()?;
            let ema = r.f32()?;
            let momentum = r.f32()?;
            let (idx, site) = split_tag(&tag)?;
            let obs = RangeObserver::frozen_at(ema, momentum)?;
            let q = quant_at(&mut model, idx)?;
            match site {
                "i8" => q.input_observer = obs,
                "o8" => q.output_observer = obs,
                other => return Err(Error::Checkpoint(format!("unknown observer `{other}`"))),
            }
        }
        let expected = 2 * model.quant_layers().count();
        if seen != expected || n_obs != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors and observers, found {seen} and {n_obs}"
            )));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        model.freeze();
        Ok(Checkpoint { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn split_tag(tag: &str) -> Result<(usize, &str)> {
    let (idx, field) = tag
        .split_once('.')
        .ok_or_else(|| Error::Checkpoint(format!("malformed record name `{tag}`")))?;
    let idx = idx
        .parse()
        .map_err(|_| Error::Checkpoint(format!("malformed record name `{tag}`")))?;
    Ok((idx, field))
}

fn quant_at(model: &mut ModelGraph, idx: usize) -> Result<&mut QLayer> {
    model
        .quant_layers_mut()
        .find(|(i, _)| *i == idx)
        .map(|(_, q)| q)
        .ok_or_else(|| Error::Checkpoint(format!("record for non-quantized layer {idx}")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 8 {
            return Err(Error::Checkpoint(format!("rank {n} too large")));
        }
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }
}
