//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "PFV1"
//! config length, config text (`key = value` lines)
//! repeated until EOF:
//!     name length, name (UTF-8), rank, dims[rank], f32 LE values
//! ```
//!
//! Tensors appear in parameter declaration order.

use std::path::Path;

use crate::config::{format_kv, parse_kv, KeyValue};
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"PFV1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, extra: &[(&str, String)]) -> Self {
        let mut pairs: Vec<(&str, String)> = model.config().pairs();
        pairs.extend(extra.iter().cloned());
        Self {
            config_text: format_kv(&pairs),
            tensors: model
                .params()
                .iter()
                .map(|(name, t)| {
                    (
                        name.to_string(),
                        t.shape().to_vec(),
                        t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.config_text.len());
        out.extend_from_slice(self.config_text.as_bytes());
        for (name, shape, data) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, shape.len());
            for &d in shape {
                put_u32(&mut out, d);
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a PFV1 checkpoint".into()));
        }
        let n = r.u32()?;
        let config_text = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: implausible shape {shape:?}")))?;
            let data = r
                .take(4 * len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, shape, data));
        }
        Ok(Self {
            config_text,
            tensors,
        })
    }

    /// Model settings from the config block plus any other keys it holds.
    pub fn model_config(&self) -> Result<(ModelConfig, Vec<(String, String)>)> {
        let mut cfg = ModelConfig::default();
        let mut extra = Vec::new();
        for (k, v) in parse_kv(&self.config_text)? {
            if !cfg.set(&k, &v)? {
                extra.push((k, v));
            }
        }
        cfg.validate()?;
        Ok((cfg, extra))
    }

    /// Builds the model described by the config block and fills in every
    /// tensor.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let (cfg, _) = self.model_config()?;
        let mut model = Model::new(cfg, 0)?;
        let expected: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        let found: Vec<&String> = self.tensors.iter().map(|(n, _, _)| n).collect();
        if expected.iter().collect::<Vec<_>>() != found {
            return Err(Error::Checkpoint(format!(
                "tensor list does not match the configured model ({} expected, {} found)",
                expected.len(),
                found.len()
            )));
        }
        for (name, shape, data) in &self.tensors {
            let values = data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect();
            model.params_mut().load(name, shape, values)?;
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, extra: &[(&str, String)]) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model, extra).encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    read_checkpoint(path)?.to_model()
}
