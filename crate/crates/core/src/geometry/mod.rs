//! Ground-truth geometry: point projection, co-visibility overlap between
//! patch grids and patch-pair supervision from depth or correspondences.

mod overlap;
mod projection;
mod supervision;

pub use overlap::{image_overlap, overlap_from_points, OverlapMatrix};
pub use projection::{patch_of_pixel, project_point};
pub use supervision::{
    build_supervision_depth, build_supervision_matches, GtMatchSet, PatchPairLabel,
    SupervisionConfig, DEFAULT_MIN_MATCHES,
};
