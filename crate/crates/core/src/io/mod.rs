//! File formats: feature/embedding containers, checkpoints, manifests, depth
//! maps and the JSON-lines records exchanged between pipeline stages.

mod checkpoint;
mod features;
mod manifest;
mod records;

use std::io::{Read, Write};
use std::path::Path;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use features::{
    read_features, read_features_from, write_features, write_features_to, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use manifest::{read_depth_pgm, write_depth_pgm, CameraSpec, DepthSpec, Manifest, ManifestImage};
pub use records::{
    read_jsonl, write_jsonl, IndexSidecar, OverlapRecord, RankedEntry, RetrievalRecord,
    SupervisionRecord,
};

use crate::error::{Result, VopError};

/// Writes `path` through a temporary sibling file and renames it into place.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut std::fs::File) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| VopError::io(dir, e))?;
    body(tmp.as_file_mut())?;
    tmp.as_file_mut()
        .flush()
        .map_err(|e| VopError::io(path, e))?;
    tmp.persist(path).map_err(|e| VopError::io(path, e.error))?;
    Ok(())
}

pub fn atomic_write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, |f| f.write_all(bytes).map_err(|e| VopError::io(path, e)))
}

pub(crate) fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            VopError::Corruption(format!("truncated while reading {what}"))
        }
        _ => VopError::io("<stream>", e),
    })
}
