//! Exact radius search over patch embeddings: calibrates the threshold from
//! random patch pairs, then compares the tree search with a linear scan.
//!
//!     cargo run --release --example radius_search -- [images]

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vop::index::{build_index, calibrate_radius};
use vop::types::{ImageEmbeddings, PatchGrid};

fn main() -> vop::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(40, |a| a.parse().expect("images"));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = PatchGrid::default();
    // a shared component makes the similarities positive on average
    let shared: Vec<f64> = (0..256).map(|_| StandardNormal.sample(&mut rng)).collect();
    let db: Vec<ImageEmbeddings> = (0..n)
        .map(|i| {
            let rows = Array2::from_shape_fn((256, 256), |(_, k)| {
                {
                let z: f64 = StandardNormal.sample(&mut rng);
                shared[k] + 0.8 * z
            }
            });
            ImageEmbeddings::from_raw(format!("db{i}"), grid, &rows, None)
        })
        .collect::<vop::Result<_>>()?;
    let index = build_index(&db)?;
    let eps = calibrate_radius(&db, &db, 100, &mut rng)?.epsilon;
    println!("{} entries, calibrated epsilon {eps}", index.entry_count());
    let (mut t_tree, mut t_scan, mut hits) = (0.0, 0.0, 0);
    for p in (0..256).step_by(16) {
        let q = db[0].patch(p);
        let t = Instant::now();
        let a = index.radius_neighbors(q, eps, None);
        t_tree += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let b = index.linear_scan(q, eps, None);
        t_scan += t.elapsed().as_secs_f64();
        assert_eq!(a, b);
        hits += a.len();
    }
    println!("16 queries, {hits} neighbors; tree {t_tree:.4}s, scan {t_scan:.4}s");
    Ok(())
}
