//! `SACP` container: magic, `u32` version, `u64` header length, JSON header,
//! then little-endian `f32` blobs for parameters, first and second moments.

use std::path::Path;

use engine::Tensor;
use kpose::nn::ParamStore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"SACP";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 3] = ["params", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in floats from the start of each section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    adam_t: u64,
    rng: ChaCha8Rng,
    sections: Vec<String>,
    floats_per_section: usize,
    tensors: Vec<TensorEntry>,
}

/// A resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

fn bad(path: &str, msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint { path: path.into(), msg: msg.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
            offset += t.numel();
        }
        if !self.params.same_layout(&self.adam.m) || !self.params.same_layout(&self.adam.v) {
            return Err(bad("<memory>", "optimizer moments do not match the parameters"));
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            rng: self.rng.clone(),
            sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
            floats_per_section: offset,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 12 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.params, &self.adam.m, &self.adam.v] {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad(origin, "missing SACP magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(origin, format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad(origin, "truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.sections != SECTIONS {
            return Err(bad(origin, format!("unexpected sections {:?}", header.sections)));
        }
        let n = header.floats_per_section;
        let blob = &bytes[16 + len..];
        if blob.len() != 3 * 4 * n {
            return Err(bad(origin, format!("expected {} blob bytes, found {}", 12 * n, blob.len())));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset + numel > n {
                return Err(bad(origin, format!("tensor `{}` overruns its section", e.name)));
            }
            for (k, store) in stores.iter_mut().enumerate() {
                let data = floats[k * n + e.offset..k * n + e.offset + numel].to_vec();
                store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).map_err(kpose::CoreError::from)?)?;
            }
        }
        let [params, m, v] = stores;
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            adam: AdamState { m, v, t: header.adam_t },
            rng: header.rng,
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
