//! Binary container for per-image patch features and embeddings.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VOPF" | version: u32 = 1 | image_count: u64
//! per image:
//!   id_len: u32 | id: UTF-8 bytes | n_patches: u32 | dim: u32 | has_cls: u8
//!   patch data: n_patches × dim f32, row-major
//!   cls data:   dim f32 (only when has_cls = 1)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{atomic_write, read_exact_or_corrupt};
use crate::error::{Result, VopError};
use crate::types::{ImageFeatures, PatchGrid, DEFAULT_PATCH_SIDE};

pub const FEATURE_MAGIC: &[u8; 4] = b"VOPF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(records: &[ImageFeatures], path: impl AsRef<Path>) -> Result<()> {
    for r in records {
        validate_record(r)?;
    }
    atomic_write(path.as_ref(), |w| write_features_to(records, w))
}

pub fn write_features_to<W: Write>(records: &[ImageFeatures], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    let io = |e| VopError::io("<feature stream>", e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    for r in records {
        validate_record(r)?;
        let id = r.image_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(id).map_err(io)?;
        w.write_all(&(r.n_patches() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(r.dim() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&[u8::from(r.cls_feat.is_some())]).map_err(io)?;
        write_f32s(&mut w, r.patch_feats.iter()).map_err(io)?;
        if let Some(cls) = &r.cls_feat {
            write_f32s(&mut w, cls.iter()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

fn validate_record(r: &ImageFeatures) -> Result<()> {
    // Records built through `ImageFeatures::new` already hold these; fields are
    // public so re-check before anything reaches disk.
    ImageFeatures::new(
        r.image_id.clone(),
        r.grid,
        r.patch_feats.clone(),
        r.cls_feat.clone(),
    )
    .map(|_| ())
}

fn write_f32s<'a, W: Write>(
    w: &mut W,
    values: impl Iterator<Item = &'a f32>,
) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads every record of a feature file. Grids are inferred from the patch
/// count assuming the default patch side.
pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<ImageFeatures>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VopError::io(path, e))?;
    read_features_from(BufReader::new(file))
}

pub fn read_features_from<R: Read>(mut r: R) -> Result<Vec<ImageFeatures>> {
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(VopError::Format(format!(
            "bad magic {magic:?}, expected {FEATURE_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FEATURE_VERSION {
        return Err(VopError::Format(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r, "image count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for index in 0..count {
        let id_len = read_u32(&mut r, "id length")? as usize;
        let mut id = vec![0u8; id_len];
        read_exact_or_corrupt(&mut r, &mut id, "image id")?;
        let image_id = String::from_utf8(id)
            .map_err(|_| VopError::Corruption(format!("record {index}: id is not UTF-8")))?;
        let n_patches = read_u32(&mut r, "patch count")? as usize;
        let dim = read_u32(&mut r, "dimension")? as usize;
        let mut flag = [0u8; 1];
        read_exact_or_corrupt(&mut r, &mut flag, "cls flag")?;
        let has_cls = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(VopError::Corruption(format!(
                    "record {index}: cls flag {other}"
                )))
            }
        };
        let data = read_f32s(&mut r, n_patches * dim)?;
        let patch_feats = Array2::from_shape_vec((n_patches, dim), data)
            .map_err(|e| VopError::Corruption(e.to_string()))?;
        let cls_feat = if has_cls {
            Some(Array1::from_vec(read_f32s(&mut r, dim)?))
        } else {
            None
        };
        let grid = PatchGrid::from_patch_count(n_patches, DEFAULT_PATCH_SIDE)?;
        out.push(ImageFeatures::new(image_id, grid, patch_feats, cls_feat)?);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => Ok(out),
        Ok(_) => Err(VopError::Corruption("trailing bytes after last record".into())),
        Err(e) => Err(VopError::io("<feature stream>", e)),
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_corrupt(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    read_exact_or_corrupt(r, &mut bytes, "float payload")?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(rng: &mut ChaCha8Rng, id: String, rows: usize, dim: usize) -> ImageFeatures {
        let grid = PatchGrid::new((rows * 14) as u32, 14).unwrap();
        let n = grid.n_patches();
        let data = Array2::from_shape_fn((n, dim), |_| rng.gen_range(-5.0f32..5.0));
        let cls = rng
            .gen_bool(0.5)
            .then(|| Array1::from_shape_fn(dim, |_| rng.gen::<f32>()));
        ImageFeatures::new(id, grid, data, cls).unwrap()
    }

    #[test]
    fn single_record_roundtrip_with_cls() {
        let grid = PatchGrid::default();
        let feats = Array2::from_shape_fn((256, 4), |(i, j)| (i * 4 + j) as f32 * 0.5);
        let rec = ImageFeatures::new("img/0.jpg", grid, feats, Some(Array1::ones(4))).unwrap();
        let mut buf = Vec::new();
        write_features_to(std::slice::from_ref(&rec), &mut buf).unwrap();
        let back = read_features_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].patch_feats.dim(), (256, 4));
        assert_eq!(back[0], rec);
    }

    #[test]
    fn empty_list_roundtrip() {
        let mut buf = Vec::new();
        write_features_to(&[], &mut buf).unwrap();
        assert_eq!(buf.len(), 16);
        assert!(read_features_from(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn three_random_records_roundtrip_through_file() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<_> = (0..3)
            .map(|i| random_record(&mut rng, format!("r{i}"), 2 + i, 5))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vopf");
        write_features(&recs, &path).unwrap();
        assert_eq!(read_features(&path).unwrap(), recs);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut buf = Vec::new();
        write_features_to(&[], &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_features_from(buf.as_slice()),
            Err(VopError::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = random_record(&mut rng, "a".into(), 2, 3);
        let mut buf = Vec::new();
        write_features_to(&[rec], &mut buf).unwrap();
        for cut in [10, 20, buf.len() - 1] {
            assert!(matches!(
                read_features_from(&buf[..cut]),
                Err(VopError::Corruption(_))
            ));
        }
        buf.push(0);
        assert!(matches!(
            read_features_from(buf.as_slice()),
            Err(VopError::Corruption(_))
        ));
    }

    #[test]
    fn non_finite_value_is_validation_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rec = random_record(&mut rng, "a".into(), 1, 2);
        let mut buf = Vec::new();
        write_features_to(&[rec], &mut buf).unwrap();
        // first float of the patch payload: 16 header + 4 + 1 id + 4 + 4 + 1
        let at = 16 + 4 + 1 + 4 + 4 + 1;
        buf[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            read_features_from(buf.as_slice()),
            Err(VopError::Validation(_))
        ));
    }

    #[test]
    fn zero_dim_features_rejected_on_write() {
        let rec = ImageFeatures {
            image_id: "z".into(),
            grid: PatchGrid::new(14, 14).unwrap(),
            patch_feats: Array2::zeros((1, 0)),
            cls_feat: None,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_features(&[rec], dir.path().join("z.vopf")),
            Err(VopError::Validation(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn roundtrip_is_identity(seed in any::<u64>(), n in 0usize..5, rows in 1usize..4, dim in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..n)
                .map(|i| random_record(&mut rng, format!("id-{i}-é"), rows, dim))
                .collect();
            let mut buf = Vec::new();
            write_features_to(&recs, &mut buf).unwrap();
            prop_assert_eq!(read_features_from(buf.as_slice()).unwrap(), recs);
        }
    }
}
