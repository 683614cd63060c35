//! Ground-truth geometry on a synthetic room: patch co-visibility between two
//! cameras, the image overlap score and depth-based patch supervision.
//!
//!     cargo run --release --example overlap_supervision

use vop::geometry::{build_supervision_depth, image_overlap, overlap_from_points, SupervisionConfig};
use vop::synthetic::{RoomConfig, SyntheticRoom};

fn main() -> vop::Result<()> {
    let room = SyntheticRoom::generate(&RoomConfig {
        dim: 8,
        ..Default::default()
    })?;
    println!("{} cameras, {} surface points", room.cameras.len(), room.points.len());
    let cfg = SupervisionConfig::default();
    let mut pairs: Vec<(usize, u64)> = (1..room.cameras.len())
        .map(|j| {
            let m = overlap_from_points(&room.points, &room.cameras[0], &room.cameras[j], &room.grid);
            (j, image_overlap(&m).0)
        })
        .collect();
    let disjoint = pairs.iter().filter(|(_, o)| *o == 0).count();
    println!("{} of {} views share no points with {}", disjoint, pairs.len(), room.ids[0]);
    pairs.sort_by_key(|(j, o)| (std::cmp::Reverse(*o), *j));
    for &(j, _) in pairs.iter().take(5) {
        let m = overlap_from_points(&room.points, &room.cameras[0], &room.cameras[j], &room.grid);
        let (score, corr) = image_overlap(&m);
        let sup = build_supervision_depth(
            &room.ids[0],
            &room.ids[j],
            &room.depths[0],
            &room.depths[j],
            &room.cameras[0],
            &room.cameras[j],
            &room.grid,
            &cfg,
        )?;
        println!(
            "{} vs {}: {} co-visible points, overlap {score} over {} patches, {} depth positives (fraction {:.2})",
            room.ids[0],
            room.ids[j],
            m.total(),
            corr.len(),
            sup.positives().count(),
            sup.overlap_fraction()
        );
    }
    Ok(())
}
