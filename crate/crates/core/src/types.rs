//! Shared domain types: the patch grid, per-image features and embeddings,
//! pinhole cameras and depth maps.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Result, VopError};

/// Default input resolution (square) fed to the backbone.
pub const DEFAULT_IMAGE_SIDE: u32 = 224;
/// Default backbone patch size.
pub const DEFAULT_PATCH_SIDE: u32 = 14;
/// Rows whose pre-normalization norm falls below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Uniform square tiling of a square image into `rows_cols × rows_cols` patches.
///
/// Patch `p` sits at row `p / rows_cols`, column `p % rows_cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    image_side: u32,
    patch_side: u32,
}

impl Default for PatchGrid {
    fn default() -> Self {
        Self {
            image_side: DEFAULT_IMAGE_SIDE,
            patch_side: DEFAULT_PATCH_SIDE,
        }
    }
}

impl PatchGrid {
    pub fn new(image_side: u32, patch_side: u32) -> Result<Self> {
        if patch_side == 0 || image_side == 0 {
            return Err(VopError::Validation("grid sides must be positive".into()));
        }
        if !image_side.is_multiple_of(patch_side) {
            return Err(VopError::Validation(format!(
                "image side {image_side} is not a multiple of patch side {patch_side}"
            )));
        }
        Ok(Self {
            image_side,
            patch_side,
        })
    }

    /// Infers a grid from a patch count, assuming `patch_side` pixels per patch.
    pub fn from_patch_count(n_patches: usize, patch_side: u32) -> Result<Self> {
        let rows = (n_patches as f64).sqrt().round() as usize;
        if rows == 0 || rows * rows != n_patches {
            return Err(VopError::Validation(format!(
                "patch count {n_patches} is not a positive perfect square"
            )));
        }
        Self::new(rows as u32 * patch_side, patch_side)
    }

    pub fn image_side(&self) -> u32 {
        self.image_side
    }

    pub fn patch_side(&self) -> u32 {
        self.patch_side
    }

    pub fn rows_cols(&self) -> usize {
        (self.image_side / self.patch_side) as usize
    }

    pub fn n_patches(&self) -> usize {
        self.rows_cols() * self.rows_cols()
    }

    pub fn row_col(&self, patch: usize) -> (usize, usize) {
        (patch / self.rows_cols(), patch % self.rows_cols())
    }

    pub fn patch_index(&self, row: usize, col: usize) -> usize {
        row * self.rows_cols() + col
    }

    /// Grid obtained by merging `factor × factor` blocks of patches.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.rows_cols().is_multiple_of(factor) {
            return Err(VopError::Validation(format!(
                "pool factor {factor} does not divide grid size {}",
                self.rows_cols()
            )));
        }
        Self::new(self.image_side, self.patch_side * factor as u32)
    }
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f32>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(VopError::Validation(format!("non-finite value in {what}")))
    }
}

/// Backbone output for one image: one feature row per patch plus an optional
/// global token.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub grid: PatchGrid,
    pub patch_feats: Array2<f32>,
    pub cls_feat: Option<Array1<f32>>,
}

impl ImageFeatures {
    pub fn new(
        image_id: impl Into<String>,
        grid: PatchGrid,
        patch_feats: Array2<f32>,
        cls_feat: Option<Array1<f32>>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if patch_feats.nrows() != grid.n_patches() {
            return Err(VopError::DimensionMismatch {
                context: "patch feature rows",
                expected: grid.n_patches(),
                actual: patch_feats.nrows(),
            });
        }
        if patch_feats.ncols() == 0 {
            return Err(VopError::Validation(format!(
                "image `{image_id}` has zero-dimensional features"
            )));
        }
        check_finite(patch_feats.iter(), "patch features")?;
        if let Some(cls) = &cls_feat {
            if cls.len() != patch_feats.ncols() {
                return Err(VopError::DimensionMismatch {
                    context: "cls feature",
                    expected: patch_feats.ncols(),
                    actual: cls.len(),
                });
            }
            check_finite(cls.iter(), "cls feature")?;
        }
        Ok(Self {
            image_id,
            grid,
            patch_feats,
            cls_feat,
        })
    }

    pub fn dim(&self) -> usize {
        self.patch_feats.ncols()
    }

    pub fn n_patches(&self) -> usize {
        self.patch_feats.nrows()
    }
}

/// Unit-norm patch embeddings of one image. Inner products between rows are
/// cosine similarities.
///
/// Rows that were (numerically) zero before normalization are kept as zeros
/// and flagged in `degenerate`; they never match anything.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddings {
    image_id: String,
    grid: PatchGrid,
    patch_embs: Array2<f32>,
    cls_emb: Option<Array1<f32>>,
    degenerate: Vec<bool>,
}

/// L2-normalizes `row` in place. Returns `false` when the row is degenerate
/// (and leaves it zeroed).
pub(crate) fn normalize_row(row: &mut [f64]) -> bool {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        row.iter_mut().for_each(|v| *v = 0.0);
        false
    } else {
        row.iter_mut().for_each(|v| *v /= norm);
        true
    }
}

impl ImageEmbeddings {
    /// Builds embeddings from raw (unnormalized) rows.
    pub fn from_raw(
        image_id: impl Into<String>,
        grid: PatchGrid,
        rows: &Array2<f64>,
        cls: Option<&Array1<f64>>,
    ) -> Result<Self> {
        if rows.nrows() != grid.n_patches() {
            return Err(VopError::DimensionMismatch {
                context: "embedding rows",
                expected: grid.n_patches(),
                actual: rows.nrows(),
            });
        }
        if rows.ncols() == 0 {
            return Err(VopError::Validation("zero-dimensional embeddings".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(VopError::Validation("non-finite embedding value".into()));
        }
        let dim = rows.ncols();
        let mut patch_embs = Array2::<f32>::zeros((rows.nrows(), dim));
        let mut degenerate = Vec::with_capacity(rows.nrows());
        let mut buf = vec![0.0f64; dim];
        for (src, mut dst) in rows.outer_iter().zip(patch_embs.outer_iter_mut()) {
            buf.iter_mut().zip(src.iter()).for_each(|(b, s)| *b = *s);
            degenerate.push(!normalize_row(&mut buf));
            dst.iter_mut().zip(&buf).for_each(|(d, s)| *d = *s as f32);
        }
        let cls_emb = match cls {
            Some(c) => {
                if c.len() != dim {
                    return Err(VopError::DimensionMismatch {
                        context: "cls embedding",
                        expected: dim,
                        actual: c.len(),
                    });
                }
                let mut v = c.to_vec();
                normalize_row(&mut v);
                Some(v.into_iter().map(|x| x as f32).collect())
            }
            None => None,
        };
        Ok(Self {
            image_id: image_id.into(),
            grid,
            patch_embs,
            cls_emb,
            degenerate,
        })
    }

    /// Normalizes stored rows (e.g. an embedding file read from disk). Rows
    /// already of unit norm within 1e-6 are kept bit for bit, so a
    /// write/read cycle reproduces the same embeddings.
    pub fn from_features(features: &ImageFeatures) -> Result<Self> {
        let rows = features.patch_feats.mapv(f64::from);
        let cls = features.cls_feat.as_ref().map(|c| c.mapv(f64::from));
        let mut out = Self::from_raw(
            features.image_id.clone(),
            features.grid,
            &rows,
            cls.as_ref(),
        )?;
        let is_unit = |v: &[f32]| (dot_slices(v, v).sqrt() - 1.0).abs() < 1e-6;
        for (src, mut dst) in features.patch_feats.outer_iter().zip(out.patch_embs.outer_iter_mut()) {
            let src = src.to_vec();
            if is_unit(&src) {
                dst.iter_mut().zip(&src).for_each(|(d, s)| *d = *s);
            }
        }
        if let (Some(src), Some(dst)) = (&features.cls_feat, out.cls_emb.as_mut()) {
            if is_unit(&src.to_vec()) {
                dst.assign(src);
            }
        }
        Ok(out)
    }

    /// Embeddings with the global vector set to the re-normalized mean of the
    /// non-degenerate patch embeddings.
    pub fn with_mean_cls(mut self) -> Self {
        let mut mean = vec![0.0f64; self.dim()];
        for (row, degenerate) in self.patch_embs.outer_iter().zip(&self.degenerate) {
            if !degenerate {
                mean.iter_mut().zip(row.iter()).for_each(|(m, v)| *m += *v as f64);
            }
        }
        normalize_row(&mut mean);
        self.cls_emb = Some(mean.into_iter().map(|x| x as f32).collect());
        self
    }

    pub fn into_features(self) -> ImageFeatures {
        ImageFeatures {
            image_id: self.image_id,
            grid: self.grid,
            patch_feats: self.patch_embs,
            cls_feat: self.cls_emb,
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.patch_embs.ncols()
    }

    pub fn n_patches(&self) -> usize {
        self.patch_embs.nrows()
    }

    pub fn patch_embs(&self) -> &Array2<f32> {
        &self.patch_embs
    }

    pub fn patch(&self, p: usize) -> ArrayView1<'_, f32> {
        self.patch_embs.row(p)
    }

    pub fn cls_emb(&self) -> Option<&Array1<f32>> {
        self.cls_emb.as_ref()
    }

    pub fn is_degenerate(&self, p: usize) -> bool {
        self.degenerate[p]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }
}

/// Cosine similarity of two unit vectors, accumulated in double precision.
///
/// Every similarity in the crate goes through this function so that indexed
/// search and linear scans agree bit for bit.
#[inline]
pub fn similarity(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => dot_slices(a, b),
        _ => a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum(),
    }
}

#[inline]
pub(crate) fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

/// Pinhole camera with world-to-camera rotation `R`, translation `t` and
/// intrinsics `K`: a world point `X` lands at `K (R X + t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
}

impl CameraModel {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: Matrix3<f64>,
    ) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth.is_nan() || orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(VopError::Validation(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(VopError::Validation("non-finite translation".into()));
        }
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0)
            || k[(1, 0)] != 0.0
            || k[(2, 0)] != 0.0
            || k[(2, 1)] != 0.0
            || !k.iter().all(|v| v.is_finite())
        {
            return Err(VopError::Validation(
                "intrinsics must be upper triangular with positive focal lengths".into(),
            ));
        }
        let intrinsics_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| VopError::Validation("singular intrinsics".into()))?;
        Ok(Self {
            rotation,
            translation,
            intrinsics,
            intrinsics_inv,
        })
    }

    /// Builds a camera from row-major `R` (9 values), `t` (3) and `K` (9).
    pub fn from_slices(r: &[f64], t: &[f64], k: &[f64]) -> Result<Self> {
        if r.len() != 9 || t.len() != 3 || k.len() != 9 {
            return Err(VopError::Validation(
                "camera needs 9 rotation, 3 translation and 9 intrinsic values".into(),
            ));
        }
        Self::new(
            Matrix3::from_row_slice(r),
            Vector3::from_column_slice(t),
            Matrix3::from_row_slice(k),
        )
    }

    /// Camera at world position `center` looking along `forward` with the
    /// image y axis roughly aligned to `down`.
    pub fn look_along(
        center: Vector3<f64>,
        forward: Vector3<f64>,
        down: Vector3<f64>,
        intrinsics: Matrix3<f64>,
    ) -> Result<Self> {
        let z = forward.normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Self::new(rotation, translation, intrinsics)
    }

    /// Pinhole intrinsics with focal length `focal` and principal point at
    /// the image center.
    pub fn centered_intrinsics(focal: f64, image_side: u32) -> Matrix3<f64> {
        let c = image_side as f64 / 2.0;
        Matrix3::new(focal, 0.0, c, 0.0, focal, c, 0.0, 0.0, 1.0)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn intrinsics_inv(&self) -> &Matrix3<f64> {
        &self.intrinsics_inv
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn camera_to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Back-projects pixel coordinates at camera-frame depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let ray = self.intrinsics_inv * Vector3::new(u, v, 1.0);
        self.camera_to_world(&(ray * (z / ray.z)))
    }

    pub fn row_major(&self) -> ([f64; 9], [f64; 3], [f64; 9]) {
        let mut r = [0.0; 9];
        let mut k = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = self.rotation[(row, col)];
                k[row * 3 + col] = self.intrinsics[(row, col)];
            }
        }
        (r, [self.translation.x, self.translation.y, self.translation.z], k)
    }
}

/// Per-pixel camera-frame depth; `0` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width as usize * height as usize {
            return Err(VopError::DimensionMismatch {
                context: "depth map pixels",
                expected: width as usize * height as usize,
                actual: depth.len(),
            });
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(VopError::Validation(
                "depth values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            depth,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    /// Depth at integer pixel `(x, y)`, `None` outside the map or where invalid.
    pub fn at(&self, x: i64, y: i64) -> Option<f64> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        let d = self.depth[y as usize * self.width as usize + x as usize];
        (d > 0.0).then_some(d)
    }

    /// Depth at the pixel containing continuous coordinates `(u, v)`.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        self.at(u.floor() as i64, v.floor() as i64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_is_16_by_16() {
        let grid = PatchGrid::default();
        assert_eq!(grid.rows_cols(), 16);
        assert_eq!(grid.n_patches(), 256);
    }

    #[test]
    fn grid_rejects_non_multiple() {
        assert!(PatchGrid::new(224, 15).is_err());
        assert!(PatchGrid::new(224, 0).is_err());
        assert!(PatchGrid::from_patch_count(255, 14).is_err());
        assert_eq!(
            PatchGrid::from_patch_count(64, 14).unwrap(),
            PatchGrid::new(112, 14).unwrap()
        );
    }

    proptest! {
        #[test]
        fn patch_index_row_col_bijection(rows in 1u32..40, side in 1u32..20) {
            let grid = PatchGrid::new(rows * side, side).unwrap();
            let mut seen = vec![false; grid.n_patches()];
            for (p, s) in seen.iter_mut().enumerate() {
                let (r, c) = grid.row_col(p);
                prop_assert!(r < grid.rows_cols() && c < grid.rows_cols());
                prop_assert_eq!(grid.patch_index(r, c), p);
                prop_assert!(!*s);
                *s = true;
            }
        }
    }

    #[test]
    fn features_validate_shape_and_values() {
        let grid = PatchGrid::new(28, 14).unwrap();
        assert!(ImageFeatures::new("a", grid, Array2::zeros((4, 3)), None).is_ok());
        assert!(ImageFeatures::new("a", grid, Array2::zeros((5, 3)), None).is_err());
        assert!(ImageFeatures::new("a", grid, Array2::zeros((4, 0)), None).is_err());
        let mut bad = Array2::zeros((4, 3));
        bad[(1, 1)] = f32::NAN;
        assert!(ImageFeatures::new("a", grid, bad, None).is_err());
        assert!(ImageFeatures::new("a", grid, Array2::zeros((4, 3)), Some(Array1::zeros(2))).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_or_flagged() {
        let grid = PatchGrid::new(28, 14).unwrap();
        let rows = ndarray::array![[3.0, 4.0], [0.0, 0.0], [-1.0, 1.0], [1e-300, 0.0]];
        let emb = ImageEmbeddings::from_raw("x", grid, &rows, None).unwrap();
        assert!((similarity(emb.patch(0), emb.patch(0)) - 1.0).abs() < 1e-6);
        assert!(emb.is_degenerate(1));
        assert!(emb.is_degenerate(3));
        assert!(!emb.is_degenerate(2));
        assert_eq!(emb.degenerate_count(), 2);
        assert_eq!(emb.patch(1).to_vec(), vec![0.0, 0.0]);
        let emb = emb.with_mean_cls();
        let cls = emb.cls_emb().unwrap();
        assert!((similarity(cls.view(), cls.view()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn camera_rejects_bad_rotation_and_intrinsics() {
        let k = CameraModel::centered_intrinsics(100.0, 224);
        let t = Vector3::zeros();
        assert!(CameraModel::new(Matrix3::identity(), t, k).is_ok());
        assert!(CameraModel::new(Matrix3::identity() * 2.0, t, k).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraModel::new(reflect, t, k).is_err());
        let mut bad_k = k;
        bad_k[(2, 0)] = 0.5;
        assert!(CameraModel::new(Matrix3::identity(), t, bad_k).is_err());
        bad_k = k;
        bad_k[(0, 0)] = -1.0;
        assert!(CameraModel::new(Matrix3::identity(), t, bad_k).is_err());
    }

    #[test]
    fn unproject_inverts_projection() {
        let k = CameraModel::centered_intrinsics(150.0, 224);
        let cam = CameraModel::look_along(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(0.3, -0.2, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
            k,
        )
        .unwrap();
        let x = cam.unproject(40.5, 190.25, 7.0);
        let xc = cam.world_to_camera(&x);
        assert!((xc.z - 7.0).abs() < 1e-9);
        let px = cam.intrinsics() * xc / xc.z;
        assert!((px.x - 40.5).abs() < 1e-9 && (px.y - 190.25).abs() < 1e-9);
    }

    #[test]
    fn depth_map_lookup() {
        let d = DepthMap::new(2, 2, vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        assert_eq!(d.at(0, 0), Some(1.0));
        assert_eq!(d.at(1, 0), None);
        assert_eq!(d.sample(1.9, 1.2), Some(3.0));
        assert_eq!(d.sample(-0.1, 0.0), None);
        assert_eq!(d.sample(2.0, 0.0), None);
        assert!(DepthMap::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
    }
}
