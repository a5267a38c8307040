//! Binary checkpoints: magic, version, a JSON header, then raw little-endian
//! `f64` tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LmdError, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"LMDCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lsp,
    Lsmd,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Lsp => "lsp",
            Stage::Lsmd => "lsmd",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    step: u64,
    frozen: bool,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    /// Set on a finished projector that later stages may consume.
    pub frozen: bool,
    pub config: serde_json::Value,
    /// Free-form extras (optimizer step counts, class names, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage: Stage, step: u64, config: serde_json::Value) -> Self {
        Checkpoint {
            stage,
            step,
            frozen: false,
            config,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    /// Appends `entries` under `"{prefix}/{name}"`.
    pub fn push_group(&mut self, prefix: &str, entries: Vec<(String, Tensor)>) {
        self.tensors
            .extend(entries.into_iter().map(|(n, t)| (format!("{prefix}/{n}"), t)));
    }

    /// Entries stored under `prefix`, with the prefix stripped.
    pub fn group(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let lead = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            step: self.step,
            frozen: self.frozen,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| LmdError::Config(e.to_string()))?;
        let mut out =
            Vec::with_capacity(20 + json.len() + 8 * self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| LmdError::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated file".into()))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated file".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| bad(format!("header: {e}")))?;
        r = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < 8 * n {
                return Err(bad(format!("truncated data for {}", entry.name)));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[8 * n..];
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            stage: header.stage,
            step: header.step,
            frozen: header.frozen,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| LmdError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| LmdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LmdError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_stage(&self, stage: Stage, origin: &Path) -> Result<()> {
        if self.stage != stage {
            return Err(LmdError::Checkpoint {
                path: origin.to_path_buf(),
                reason: format!("expected a {stage} checkpoint, found {}", self.stage),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut ck = Checkpoint::new(Stage::Lsmd, 42, serde_json::json!({"a": 1}));
        ck.frozen = true;
        ck.push_group(
            "mae",
            vec![("w".into(), Tensor::from_fn(vec![2, 3], |i| (i as f64).sqrt() / 3.0))],
        );
        ck.push_group("opt", vec![("0.0".into(), Tensor::full(vec![1], f64::MIN_POSITIVE))]);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.group("mae")[0].0, "w");
    }

    #[test]
    fn corrupt_input_rejected() {
        let ck = Checkpoint::new(Stage::Lsp, 0, serde_json::Value::Null);
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
