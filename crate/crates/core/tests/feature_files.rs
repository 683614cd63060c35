use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use vop::io::{read_features, read_features_from, write_features};
use vop::types::{ImageFeatures, PatchGrid};

/// `(id, row-major patch data, dim, cls)`
type RawRecord = (String, Vec<f32>, usize, Option<Vec<f32>>);

/// Serializes records byte by byte, the way an external exporter would.
fn exporter_bytes(records: &[RawRecord]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"VOPF");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (id, data, dim, cls) in records {
        b.extend_from_slice(&(id.len() as u32).to_le_bytes());
        b.extend_from_slice(id.as_bytes());
        b.extend_from_slice(&((data.len() / dim) as u32).to_le_bytes());
        b.extend_from_slice(&(*dim as u32).to_le_bytes());
        b.push(u8::from(cls.is_some()));
        data.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        if let Some(c) = cls {
            c.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
    }
    b
}

#[test]
fn exporter_output_passes_validation_and_matches_writer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records: Vec<_> = (0..3)
        .map(|i| {
            let data: Vec<f32> = (0..256 * 1024).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cls: Vec<f32> = (0..1024).map(|_| rng.gen_range(-3.0..3.0)).collect();
            (format!("frame_{i:04}.jpg"), data, 1024, Some(cls))
        })
        .collect();
    let bytes = exporter_bytes(&records);
    let read = read_features_from(bytes.as_slice()).unwrap();
    assert_eq!(read.len(), 3);
    for (r, (id, data, _, cls)) in read.iter().zip(&records) {
        assert_eq!(&r.image_id, id);
        assert_eq!(r.patch_feats.dim(), (256, 1024));
        assert_eq!(r.grid, PatchGrid::default());
        assert_eq!(r.patch_feats.as_slice().unwrap(), data.as_slice());
        assert_eq!(r.cls_feat.as_ref().unwrap().to_vec(), *cls.as_ref().unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.vopf");
    write_features(&read, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    let empty = exporter_bytes(&[]);
    assert!(read_features_from(empty.as_slice()).unwrap().is_empty());
}

#[test]
fn exporter_output_with_wrong_patch_count_is_rejected() {
    let rec = vec![("x".to_string(), vec![0.5f32; 255 * 4], 4, None)];
    assert!(read_features_from(exporter_bytes(&rec).as_slice()).is_err());
}

#[test]
fn ten_thousand_images_read_back_with_identical_checksum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = PatchGrid::new(28, 14).unwrap();
    let records: Vec<ImageFeatures> = (0..10_000)
        .map(|i| {
            let feats = Array2::from_shape_simple_fn((grid.n_patches(), 8), || rng.gen_range(-1.0f32..1.0));
            let cls = (i % 3 == 0).then(|| Array1::from_shape_simple_fn(8, || rng.gen_range(-1.0f32..1.0)));
            ImageFeatures::new(format!("img_{i:05}"), grid, feats, cls).unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vopf"), dir.path().join("b.vopf"));
    write_features(&records, &a).unwrap();
    let before = Sha256::digest(std::fs::read(&a).unwrap());
    let back = read_features(&a).unwrap();
    assert_eq!(back.len(), 10_000);
    write_features(&back, &b).unwrap();
    let after = Sha256::digest(std::fs::read(&b).unwrap());
    assert_eq!(before, after);
    // the grid is inferred from the patch count
    assert!(back.iter().all(|r| r.grid.n_patches() == 4));
}
