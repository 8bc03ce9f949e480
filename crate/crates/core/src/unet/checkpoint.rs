//! Versioned model checkpoint container.
//!
//! Layout: the 8-byte magic `FSEGCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! tensor listed in the header as little-endian `f32`, in header order.
//! Optimizer velocity tensors, when present, follow the parameters in the
//! same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Init,
    Stage1,
    Stage2,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    stage: StageTag,
    tensors: Vec<TensorEntry>,
    has_velocity: bool,
    #[serde(default)]
    state: Option<serde_json::Value>,
}

/// A model snapshot with its stage tag, optional optimizer velocity and
/// optional trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stage: StageTag,
    pub velocity: Option<Model>,
    pub state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Model, stage: StageTag) -> Self {
        Self {
            model,
            stage,
            velocity: None,
            state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            seed: self.model.seed(),
            stage: self.stage,
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            has_velocity: self.velocity.is_some(),
            state: self.state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write_model = |m: &Model| {
            for p in m.params() {
                for v in p.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        write_model(&self.model);
        if let Some(v) = &self.velocity {
            write_model(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let hjson = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hjson)?;
        let mut model = Model::zeros(&header.config)?;
        let mut cursor = &body[hlen..];
        let mut read_model = |m: &mut Model| -> Result<()> {
            let names: Vec<(String, Vec<usize>)> = m
                .params()
                .into_iter()
                .map(|p| (p.name, p.shape))
                .collect();
            if names.len() != header.tensors.len() {
                return Err(bad("tensor count differs from architecture"));
            }
            for ((slice, (name, shape)), entry) in
                m.params_mut().into_iter().zip(names).zip(&header.tensors)
            {
                if entry.name != name || entry.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {:?} does not match expected {name} {shape:?}",
                        entry.name, entry.shape
                    )));
                }
                let nbytes = slice.len() * 4;
                if cursor.len() < nbytes {
                    return Err(bad("truncated tensor data"));
                }
                for (dst, chunk) in slice.iter_mut().zip(cursor[..nbytes].chunks_exact(4)) {
                    *dst = f32::from_le_bytes(chunk.try_into().unwrap());
                }
                cursor = &cursor[nbytes..];
            }
            Ok(())
        };
        read_model(&mut model)?;
        let velocity = if header.has_velocity {
            let mut v = Model::zeros(&header.config)?;
            read_model(&mut v)?;
            Some(v)
        } else {
            None
        };
        if !cursor.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let model = model.with_seed(header.seed);
        Ok(Self {
            model,
            stage: header.stage,
            velocity: velocity.map(|v| v.with_seed(header.seed)),
            state: header.state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_velocity_and_state() {
        let cfg = ModelConfig {
            n_blocks: 2,
            base_channels: 2,
            input_width: 8,
            input_height: 8,
            ..ModelConfig::default()
        };
        let model = Model::build(&cfg, 11).unwrap();
        let velocity = Model::build(&cfg, 12).unwrap().with_seed(11);
        let ck = Checkpoint {
            model,
            stage: StageTag::Stage2,
            velocity: Some(velocity),
            state: Some(serde_json::json!({"epoch": 3, "lr": 0.01})),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let cfg = ModelConfig {
            n_blocks: 1,
            base_channels: 1,
            input_width: 4,
            input_height: 4,
            ..ModelConfig::default()
        };
        let bytes = Checkpoint::new(Model::build(&cfg, 0).unwrap(), StageTag::Init)
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }
}
