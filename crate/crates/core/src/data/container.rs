//! Directory container: `metadata.json` + `samples.bin` (+ optional `ratings.csv`).
//!
//! `samples.bin` is the raw little-endian f32 payload in row-major
//! `[clip, subject, 1, channel, time]` order. See `docs/container.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, ModalityLayout, RatingRecord};
use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;
pub const DIM_ORDER: [&str; 5] = ["clip", "subject", "singleton", "channel", "time"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetadata {
    pub version: u32,
    /// `[V, S, 1, C, M]`
    pub dims: [usize; 5],
    #[serde(default = "default_dim_order")]
    pub dim_order: Vec<String>,
    pub dtype: String,
    pub sample_rate: f64,
    pub layout: ModalityLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<Vec<RatingRecord>>,
}

fn default_dim_order() -> Vec<String> {
    DIM_ORDER.iter().map(|s| s.to_string()).collect()
}

fn read_ratings_csv(path: &Path) -> Result<Vec<RatingRecord>> {
    let bad = |reason: String| Error::Metadata {
        path: path.into(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let out = reader
        .deserialize::<RatingRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    if out.is_empty() {
        return Err(bad("empty ratings file".into()));
    }
    Ok(out)
}

pub fn load_container(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("metadata.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        reason: format!("cannot read: {e}"),
    })?;
    let meta: ContainerMetadata = serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Metadata {
        path: meta_path.clone(),
        reason,
    };
    if meta.version != CONTAINER_VERSION {
        return Err(bad(format!(
            "unsupported container version {} (expected {CONTAINER_VERSION})",
            meta.version
        )));
    }
    if meta.dtype != "f32le" {
        return Err(bad(format!("unsupported dtype {:?} (expected \"f32le\")", meta.dtype)));
    }
    if meta.dim_order != default_dim_order() {
        return Err(bad(format!(
            "unsupported dim_order {:?} (expected {DIM_ORDER:?})",
            meta.dim_order
        )));
    }
    if meta.dims[2] != 1 {
        return Err(bad(format!("singleton axis must be 1, got {}", meta.dims[2])));
    }
    let bin_path = dir.join("samples.bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = meta.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{}: payload is {} bytes, dims {:?} as f32le need {expected}",
            bin_path.display(),
            bytes.len(),
            meta.dims
        )));
    }
    let samples: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let csv_path = dir.join("ratings.csv");
    let ratings = match (meta.ratings, csv_path.exists()) {
        (Some(_), true) => {
            return Err(bad(
                "ratings given both inline and in ratings.csv".to_string(),
            ))
        }
        (Some(r), false) => Some(r),
        (None, true) => Some(read_ratings_csv(&csv_path)?),
        (None, false) => None,
    };
    let [v, s, _, c, m] = meta.dims;
    LabeledDataset::new([v, s, c, m], meta.sample_rate, meta.layout, samples, ratings)
}

/// Write `metadata.json` (ratings inline) and `samples.bin`.
pub fn save_container(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ContainerMetadata {
        version: CONTAINER_VERSION,
        dims: dataset.dims(),
        dim_order: default_dim_order(),
        dtype: "f32le".into(),
        sample_rate: dataset.sample_rate,
        layout: (*dataset.layout).clone(),
        ratings: dataset.ratings().map(|r| r.to_vec()),
    };
    let meta_path = dir.join("metadata.json");
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    let mut bytes = Vec::with_capacity(dataset.raw().len() * 4);
    for v in dataset.raw() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bin_path = dir.join("samples.bin");
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}
