//! Writes backbone features in the binary feature format, reads them back
//! and shows how embeddings are derived from them.
//!
//!     cargo run --example feature_io -- [out.vopf]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vop::io::{read_features, write_features};
use vop::types::{ImageEmbeddings, ImageFeatures, PatchGrid};

fn main() -> vop::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| vop::VopError::io(std::env::temp_dir(), e))?;
    let path = std::env::args()
        .nth(1)
        .map_or_else(|| dir.path().join("features.vopf"), Into::into);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = PatchGrid::default();
    let records: Vec<ImageFeatures> = (0..3)
        .map(|i| {
            let feats = Array2::from_shape_simple_fn((grid.n_patches(), 1024), || rng.gen_range(-1.0..1.0));
            let cls = Array1::from_shape_simple_fn(1024, || rng.gen_range(-1.0..1.0));
            ImageFeatures::new(format!("img_{i}"), grid, feats, Some(cls))
        })
        .collect::<vop::Result<_>>()?;
    write_features(&records, &path)?;
    let size = std::fs::metadata(&path).map_err(|e| vop::VopError::io(&path, e))?.len();
    let back = read_features(&path)?;
    assert_eq!(back, records);
    println!("{} records, {} bytes at {}", back.len(), size, path.display());
    for r in &back {
        let e = ImageEmbeddings::from_features(r)?;
        println!(
            "{}: {}x{} grid, {} patches of dim {}, {} degenerate",
            r.image_id,
            r.grid.rows_cols(),
            r.grid.rows_cols(),
            e.n_patches(),
            e.dim(),
            e.degenerate_count()
        );
    }
    Ok(())
}
