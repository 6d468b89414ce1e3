//! RMKD1 checkpoint format.
//!
//! ```text
//! "RMKD1" | u32 version=1 | u32 array count
//! per array: u32 name len, UTF-8 name, u32 rank, u32 dims.., u8 dtype (0=f32, 1=f64), raw LE data
//! u32 metadata len | UTF-8 `key=value` lines
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Backbone, ModelConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RMKD1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Training stage recorded in checkpoint metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Reference,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Reference => "reference",
            Stage::Finetuned => "finetuned",
        }
    }
}

/// Named parameter arrays with model configuration and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Backbone<f64>,
    /// Provenance entries (stage, omega, seed, steps, ...). Model configuration
    /// keys are added on encode.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Backbone<f64>, stage: Stage) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".to_string(), stage.as_str().to_string());
        Checkpoint { model, metadata }
    }

    pub fn stage(&self) -> Option<&str> {
        self.metadata.get("stage").map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn encode(&self, dtype: Dtype) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.model.params.len() as u32);
        for (name, t) in self.model.params.iter() {
            w.string(name);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            match dtype {
                Dtype::F32 => {
                    w.u8(0);
                    t.data().iter().for_each(|&v| w.f32(v as f32));
                }
                Dtype::F64 => {
                    w.u8(1);
                    t.data().iter().for_each(|&v| w.f64(v));
                }
            }
        }
        let mut meta = self.metadata.clone();
        self.model.config.to_metadata(&mut meta);
        let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.string(&text);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "RMKD1");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let count = r.len_prefix(1)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.len_prefix(4)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let dtype = r.u8()?;
            let mut data = Vec::with_capacity(n.min(bytes.len()));
            match dtype {
                0 => {
                    for _ in 0..n {
                        data.push(r.f32()? as f64);
                    }
                }
                1 => {
                    for _ in 0..n {
                        data.push(r.f64()?);
                    }
                }
                other => return Err(r.error(format!("unknown dtype {other}"))),
            }
            let at = r.offset();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::format("RMKD1", at, e.to_string()))?;
            params
                .insert(name, t)
                .map_err(|e| Error::format("RMKD1", at, e.to_string()))?;
        }
        let text = r.string()?;
        r.finish()?;
        let mut metadata = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(format!("bad metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let config = ModelConfig::from_metadata(&metadata)?;
        metadata.retain(|k, _| !k.starts_with("model."));
        Ok(Checkpoint {
            model: Backbone::from_params(config, params)?,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        fs::write(path, self.encode(dtype))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let model = Backbone::init(ModelConfig::tiny(), 1).unwrap();
        let mut c = Checkpoint::new(model, Stage::Reference);
        c.set("seed", 1);
        c
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = ckpt();
        let back = Checkpoint::decode(&c.encode(Dtype::F64)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.params.content_hash(), c.model.params.content_hash());
    }

    #[test]
    fn f32_storage_is_close() {
        let c = ckpt();
        let back = Checkpoint::decode(&c.encode(Dtype::F32)).unwrap();
        for ((_, a), (_, b)) in c.model.params.iter().zip(back.model.params.iter()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn header_and_errors() {
        let bytes = ckpt().encode(Dtype::F64);
        assert_eq!(&bytes[..5], b"RMKD1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        let err = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
