//! Overlap-based retrieval: hard and soft voting with TF-IDF or uniform
//! weights on a synthetic room whose patch features share wall latents.
//!
//!     cargo run --release --example retrieval_voting

use vop::index::{build_index, calibrate_radius, retrieve_topk, RetrievalOptions, VoteMode, Weighting};
use vop::synthetic::{RoomConfig, SyntheticRoom};
use vop::types::ImageEmbeddings;

fn main() -> vop::Result<()> {
    let room = SyntheticRoom::generate(&RoomConfig {
        dim: 64,
        image_side: 112,
        ..Default::default()
    })?;
    // raw latent features already behave like embeddings here
    let db: Vec<ImageEmbeddings> = room
        .features
        .iter()
        .map(|f| ImageEmbeddings::from_features(f).map(ImageEmbeddings::with_mean_cls))
        .collect::<vop::Result<_>>()?;
    let index = build_index(&db)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let eps = calibrate_radius(&db, &db, 100, &mut rng)?.epsilon.max(0.5);
    let gt = room.overlaps();
    let overlap = |a: &str, b: &str| {
        gt.iter()
            .find(|o| (o.i == a && o.j == b) || (o.i == b && o.j == a))
            .map_or(0, |o| o.overlap)
    };
    for (mode, weighting) in [
        (VoteMode::Hard, Weighting::Tfidf),
        (VoteMode::Hard, Weighting::Uniform),
        (VoteMode::Soft, Weighting::Tfidf),
    ] {
        let mut opts = RetrievalOptions::new(eps);
        opts.mode = mode;
        opts.weighting = weighting;
        let q = &db[0];
        let top = retrieve_topk(q, &index, 5, &opts)?;
        println!("{mode:?}/{weighting:?} at epsilon {eps}:");
        for s in top.iter().filter(|s| s.db_id != q.image_id()) {
            println!(
                "  {} score {:.4} ({} matches, gt overlap {})",
                s.db_id,
                s.score,
                s.matches.len(),
                overlap(q.image_id(), &s.db_id)
            );
        }
    }
    Ok(())
}
