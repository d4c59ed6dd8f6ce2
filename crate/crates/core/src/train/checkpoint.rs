//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MEMHACL\0"
//! version      u32
//! header_len   u32, then header_len bytes of JSON (CheckpointHeader)
//! block_count  u32
//! block*       name_len u32, name (UTF-8), rank u32, dims u64 x rank,
//!              payload f32le x prod(dims)
//! checksum     u64 FNV-1a over every preceding byte
//! ```
//!
//! Blocks hold model tensors under their parameter names and Adam moments
//! as `adam.m.<name>` / `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig, Moments};
use super::config::ExperimentConfig;
use crate::classifier::{Classifier, ClassifierConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::projector::{Projector, ProjectorConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MEMHACL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ExperimentConfig,
    pub encoder: EncoderConfig,
    pub projector: Option<ProjectorConfig>,
    pub classifier: Option<ClassifierConfig>,
    /// Epochs completed. Every random stream is derived from `seed` and
    /// epoch/iteration counters, so this is the full RNG state.
    pub epoch: usize,
    pub iteration: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub adam_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub encoder: Encoder<f32>,
    pub projector: Option<Projector<f32>>,
    pub classifier: Option<Classifier<f32>>,
    pub adam: Adam<f32>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointCorrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn stores(ck: &Checkpoint) -> Vec<&ParamStore<f32>> {
    let mut v = vec![&ck.encoder.store];
    if let Some(p) = &ck.projector {
        v.push(&p.store);
    }
    if let Some(c) = &ck.classifier {
        v.push(&c.store);
    }
    v
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let n_params: usize = stores(self).iter().map(|s| s.entries().len()).sum();
        put_u32(&mut out, (n_params + 2 * self.adam.moments.len()) as u32);
        for store in stores(self) {
            for e in store.entries() {
                put_block(&mut out, &e.name, e.value.shape(), e.value.data());
            }
        }
        for (name, mo) in &self.adam.moments {
            put_block(&mut out, &format!("adam.m.{name}"), &[mo.m.len()], &mo.m);
            put_block(&mut out, &format!("adam.v.{name}"), &[mo.v.len()], &mo.v);
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 || &bytes[..8] != MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(Error::CheckpointCorrupt("missing checksum".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let mut encoder = Encoder::<f32>::with_init(header.encoder.clone(), 0, Init::Zeros)?;
        let mut projector = header
            .projector
            .clone()
            .map(|c| Projector::<f32>::with_init(c, 0, Init::Zeros))
            .transpose()?;
        let mut classifier = header
            .classifier
            .clone()
            .map(|c| Classifier::<f32>::with_init(c, 0, Init::Zeros))
            .transpose()?;
        let mut adam = Adam::new(header.adam);
        adam.step = header.adam_step;
        let count = r.u32()? as usize;
        let mut seen = 0usize;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::CheckpointCorrupt("block name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CheckpointCorrupt(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CheckpointCorrupt(format!("{name}: size")))?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if let Some(rest) = name.strip_prefix("adam.") {
                let (which, pname) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::CheckpointCorrupt(format!("bad block {name}")))?;
                let mo = adam.moments.entry(pname.to_string()).or_insert_with(|| Moments {
                    m: Vec::new(),
                    v: Vec::new(),
                });
                match which {
                    "m" => mo.m = data,
                    "v" => mo.v = data,
                    _ => return Err(Error::CheckpointCorrupt(format!("bad block {name}"))),
                }
                continue;
            }
            let tensor = Tensor::new(shape, data)?;
            let store = if name.starts_with("encoder.") {
                Some(&mut encoder.store)
            } else if name.starts_with("projector.") {
                projector.as_mut().map(|p| &mut p.store)
            } else if name.starts_with("classifier.") {
                classifier.as_mut().map(|c| &mut c.store)
            } else {
                None
            };
            let store = store.ok_or_else(|| Error::CheckpointCorrupt(format!("unexpected block {name}")))?;
            let id = store
                .find(&name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown parameter {name}")))?;
            store
                .set_value(id, tensor)
                .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
            seen += 1;
        }
        if r.pos != body.len() {
            return Err(Error::CheckpointCorrupt("trailing bytes".into()));
        }
        let mut ck = Checkpoint {
            header,
            encoder,
            projector,
            classifier,
            adam,
        };
        let expected: usize = stores(&ck).iter().map(|s| s.entries().len()).sum();
        if seen != expected {
            return Err(Error::CheckpointCorrupt(format!(
                "{seen} parameter blocks, model needs {expected}"
            )));
        }
        if ck.adam.moments.values().any(|m| m.m.len() != m.v.len()) {
            return Err(Error::CheckpointCorrupt("unpaired optimizer moments".into()));
        }
        ck.adam.step = ck.header.adam_step;
        Ok(ck)
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::CheckpointNotFound(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
