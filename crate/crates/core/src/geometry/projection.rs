use nalgebra::{Vector2, Vector3};

use crate::types::{CameraModel, PatchGrid};

/// Projects a world point through `K (R X + t)`. Points at or behind the
/// camera plane are not visible.
pub fn project_point(x: &Vector3<f64>, cam: &CameraModel) -> Option<Vector2<f64>> {
    let xc = cam.world_to_camera(x);
    if xc.z.is_nan() || xc.z <= 0.0 {
        return None;
    }
    let h = cam.intrinsics() * xc;
    Some(Vector2::new(h.x / h.z, h.y / h.z))
}

/// Patch containing continuous pixel coordinates. Patch cells are half-open:
/// `[c·s, (c+1)·s)` in both axes, so `x = image_side` is outside.
pub fn patch_of_pixel(px: &Vector2<f64>, grid: &PatchGrid) -> Option<usize> {
    let side = grid.image_side() as f64;
    if !(px.x >= 0.0 && px.y >= 0.0 && px.x < side && px.y < side) {
        return None;
    }
    let s = grid.patch_side() as f64;
    let col = ((px.x / s).floor() as usize).min(grid.rows_cols() - 1);
    let row = ((px.y / s).floor() as usize).min(grid.rows_cols() - 1);
    Some(grid.patch_index(row, col))
}
