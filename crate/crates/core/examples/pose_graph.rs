//! Pose-graph growth from retrieval lists: edges are visited rank by rank in
//! shuffled query order and verified against ground-truth overlap.
//!
//!     cargo run --release --example pose_graph -- [k] [flip probability]

use vop::index::{build_index, retrieve_topk, RetrievalOptions};
use vop::posegraph::{run_pose_graph, OverlapVerifier, PoseGraphConfig};
use vop::synthetic::{RoomConfig, SyntheticRoom};
use vop::types::ImageEmbeddings;

fn main() -> vop::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(3, |a| a.parse().expect("k"));
    let flip: f64 = args.next().map_or(0.0, |a| a.parse().expect("flip probability"));
    let room = SyntheticRoom::generate(&RoomConfig {
        dim: 64,
        image_side: 112,
        ..Default::default()
    })?;
    let db: Vec<ImageEmbeddings> = room
        .features
        .iter()
        .map(|f| ImageEmbeddings::from_features(f).map(ImageEmbeddings::with_mean_cls))
        .collect::<vop::Result<_>>()?;
    let index = build_index(&db)?;
    let opts = RetrievalOptions::new(0.5);
    let lists: Vec<(String, Vec<String>)> = db
        .iter()
        .map(|q| {
            let ranked = retrieve_topk(q, &index, k + 1, &opts)?;
            let ids = ranked.into_iter().map(|s| s.db_id).filter(|d| d != q.image_id()).take(k);
            Ok((q.image_id().to_string(), ids.collect()))
        })
        .collect::<vop::Result<_>>()?;
    let verifier = OverlapVerifier::new(room.overlaps().into_iter().map(|o| (o.i, o.j, o.overlap)), 1, flip, 0)?;
    let run = run_pose_graph(&room.ids, &lists, &verifier, &PoseGraphConfig { shuffles: 200, ..Default::default() })?;
    let s = &run.stats;
    println!("{} images, {} edges, 200 shuffles", run.n_images, run.total_edges);
    println!(
        "final components {:.1}%, largest {:.1}%, success {:.1}%, failure {:.1}%, skipped {:.1}%",
        s.cc, s.max_cc_size, s.success, s.failure, s.skipped
    );
    for p in run.trace.iter().step_by(20) {
        println!("  {:.2} of edges: {:.3} ± {:.3} components", p.normalized_pairs_processed, p.normalized_cc, p.std);
    }
    Ok(())
}
