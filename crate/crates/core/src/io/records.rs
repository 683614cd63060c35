//! JSON(-lines) records exchanged between pipeline stages.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VopError};

/// Supervision for one image pair: `{"i", "j", "pos", "neg_sampled", "overlap_fraction"}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SupervisionRecord {
    pub i: String,
    pub j: String,
    pub pos: Vec<[usize; 2]>,
    pub neg_sampled: Vec<[usize; 2]>,
    pub overlap_fraction: f64,
}

/// Ground-truth image overlap (sum of co-visible point counts over the
/// argmax patch correspondences).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OverlapRecord {
    pub i: String,
    pub j: String,
    pub overlap: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RankedEntry {
    pub db: String,
    pub score: f64,
    /// `[query patch, db patch, similarity]`
    pub matches: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RetrievalRecord {
    pub query: String,
    pub ranked: Vec<RankedEntry>,
}

/// Metadata stored next to an index's embedding file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexSidecar {
    #[serde(rename = "N")]
    pub n_images: usize,
    pub image_side: u32,
    pub patch_side: u32,
    pub epsilon: f64,
    pub calibration_seed: u64,
    /// Per database patch entry: number of database images holding at least
    /// one neighbor within `epsilon`.
    #[serde(default)]
    pub doc_freq: Option<Vec<u32>>,
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    super::atomic_write(path, |f| f.write_all(&buf).map_err(|e| VopError::io(path, e)))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VopError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VopError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            VopError::Validation(format!("{} line {}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}
