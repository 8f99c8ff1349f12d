//! Versioned binary checkpoints.
//!
//! Layout: `AFNCKPT\0`, format version (u32 LE), header length (u64 LE), a JSON
//! header, then every tensor as little-endian f32 in header order: parameters
//! first, then Adam first and second moments when present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Afn, ModelConfig};
use crate::tensor::FeatureMap;
use crate::train::AdamState;

pub const CKPT_MAGIC: [u8; 8] = *b"AFNCKPT\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Iterations run so far.
    pub iterations: u64,
    pub best_val_rmse: Option<f64>,
    /// Seed the run was started with; later epochs derive their shuffles from it.
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    progress: Progress,
    tensors: Vec<TensorEntry>,
    adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Afn<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub progress: Progress,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config().clone(),
            epoch: self.epoch,
            progress: self.progress.clone(),
            tensors: self
                .model
                .named()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape(),
                })
                .collect(),
            adam_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |ts: &[FeatureMap<f32>]| {
            for t in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(self.model.params());
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || bytes[..8] != CKPT_MAGIC {
            return Err(Error::Format("not an AFN checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| Error::Corrupt("checkpoint header truncated".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = &bytes[20 + hlen..];
        let mut take = |e: &TensorEntry| -> Result<FeatureMap<f32>> {
            let n: usize = e.shape.iter().product();
            if cursor.len() < 4 * n {
                return Err(Error::Corrupt(format!("checkpoint data truncated at {}", e.name)));
            }
            let data = cursor[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            cursor = &cursor[4 * n..];
            FeatureMap::from_vec(e.shape[0], e.shape[1], e.shape[2], data)
        };
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            named.push((e.name.clone(), take(e)?));
        }
        let optimizer = match header.adam_step {
            Some(step) => {
                let m = header.tensors.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        if !cursor.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes in checkpoint", cursor.len())));
        }
        Ok(Self {
            model: Afn::from_named(&header.model, named)?,
            epoch: header.epoch,
            progress: header.progress,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
