use ndarray::Array2;

use crate::error::Result;
use crate::types::ImageEmbeddings;

/// Averages non-overlapping `factor × factor` blocks of patch embeddings and
/// re-normalizes, giving embeddings on a grid `factor` times coarser.
/// Degenerate patches count as zeros in the average.
pub fn pool_patches(emb: &ImageEmbeddings, factor: usize) -> Result<ImageEmbeddings> {
    let grid = emb.grid();
    let coarse = grid.coarsen(factor)?;
    if factor == 1 {
        return Ok(emb.clone());
    }
    let dim = emb.dim();
    let mut rows = Array2::<f64>::zeros((coarse.n_patches(), dim));
    for p in 0..grid.n_patches() {
        let (r, c) = grid.row_col(p);
        let target = coarse.patch_index(r / factor, c / factor);
        let mut dst = rows.row_mut(target);
        dst.iter_mut()
            .zip(emb.patch(p).iter())
            .for_each(|(d, v)| *d += f64::from(*v));
    }
    rows /= (factor * factor) as f64;
    let cls = emb.cls_emb().map(|c| c.mapv(f64::from));
    ImageEmbeddings::from_raw(emb.image_id(), coarse, &rows, cls.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PatchGrid;

    fn constant(grid: PatchGrid) -> ImageEmbeddings {
        let rows = Array2::from_shape_fn((grid.n_patches(), 4), |(_, k)| [0.5, -0.5, 0.5, 0.5][k]);
        ImageEmbeddings::from_raw("c", grid, &rows, None).unwrap()
    }

    #[test]
    fn factor_one_is_identity() {
        let e = constant(PatchGrid::default());
        assert_eq!(pool_patches(&e, 1).unwrap(), e);
    }

    #[test]
    fn constant_embeddings_stay_constant() {
        let e = constant(PatchGrid::default());
        for f in [2, 4, 8, 16] {
            let p = pool_patches(&e, f).unwrap();
            assert_eq!(p.n_patches(), (16 / f) * (16 / f));
            for row in p.patch_embs().outer_iter() {
                assert_eq!(row, e.patch(0));
            }
        }
    }

    #[test]
    fn blocks_follow_the_grid() {
        let grid = PatchGrid::new(56, 14).unwrap();
        // patch p points along axis (row / 2) * 2 + col / 2 of the 2×2 grid
        let rows = Array2::from_shape_fn((16, 4), |(p, k)| {
            let (r, c) = grid.row_col(p);
            f64::from(u8::from(k == (r / 2) * 2 + c / 2))
        });
        let e = ImageEmbeddings::from_raw("g", grid, &rows, None).unwrap();
        let p = pool_patches(&e, 2).unwrap();
        for q in 0..4 {
            assert_eq!(p.patch(q)[q], 1.0);
        }
        assert!(pool_patches(&e, 3).is_err());
    }
}
