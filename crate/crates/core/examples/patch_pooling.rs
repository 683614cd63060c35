//! Coarser patch grids by average pooling: self-retrieval scores shrink with
//! the number of pooled patches.
//!
//!     cargo run --release --example patch_pooling

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vop::index::{build_index, pool_patches, retrieve_topk, RetrievalOptions, Weighting};
use vop::types::{ImageEmbeddings, PatchGrid};

fn main() -> vop::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let db: Vec<ImageEmbeddings> = (0..5)
        .map(|i| {
            let rows = Array2::from_shape_simple_fn((256, 32), || rng.gen_range(-1.0..1.0));
            ImageEmbeddings::from_raw(format!("im{i}"), PatchGrid::default(), &rows, None)
        })
        .collect::<vop::Result<_>>()?;
    let mut opts = RetrievalOptions::new(0.95);
    opts.prefilter = false;
    opts.weighting = Weighting::Uniform;
    for f in [1, 2, 4, 8, 16] {
        let pooled: Vec<_> = db.iter().map(|e| pool_patches(e, f)).collect::<vop::Result<_>>()?;
        let index = build_index(&pooled)?;
        let top = retrieve_topk(&pooled[0], &index, 2, &opts)?;
        println!(
            "factor {f:>2}: {:>3} patches, self score {}, runner-up {}",
            pooled[0].n_patches(),
            top[0].score,
            top.get(1).map_or(0.0, |s| s.score)
        );
    }
    Ok(())
}
