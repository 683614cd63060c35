//! Patch-level ground truth for training: which patch of image `j` (if any)
//! each patch of image `i` overlaps with.

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::Rng;

use super::{patch_of_pixel, project_point};
use crate::error::{Result, VopError};
use crate::io::SupervisionRecord;
use crate::types::{CameraModel, DepthMap, PatchGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupervisionConfig {
    /// Pixel stride of the dense sampling grid, in both axes.
    pub stride: u32,
    /// Maximum round-trip reprojection error, in pixels.
    pub pixel_tol: f64,
    /// Maximum relative difference between projected and observed depth.
    pub depth_tol: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            pixel_tol: 2.0,
            depth_tol: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchPairLabel {
    pub p: usize,
    pub q: usize,
    pub label: bool,
}

/// Labeled patch pairs for one image pair. Positives are one-to-one.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMatchSet {
    pub image_pair: (String, String),
    n_patches: usize,
    pairs: Vec<PatchPairLabel>,
    overlap_fraction: f64,
    /// Patches of each image that had at least one valid depth sample.
    valid: Option<(Vec<bool>, Vec<bool>)>,
}

impl GtMatchSet {
    /// Builds a match set from positives and negatives, rejecting positives
    /// that are not one-to-one.
    pub fn new(
        i: impl Into<String>,
        j: impl Into<String>,
        n_patches: usize,
        positives: &[(usize, usize)],
        negatives: &[(usize, usize)],
    ) -> Result<Self> {
        let mut used_p = vec![false; n_patches];
        let mut used_q = vec![false; n_patches];
        let mut pairs = Vec::with_capacity(positives.len() + negatives.len());
        for &(p, q) in positives {
            if p >= n_patches || q >= n_patches {
                return Err(VopError::Validation(format!("patch pair ({p}, {q}) out of range")));
            }
            if std::mem::replace(&mut used_p[p], true) || std::mem::replace(&mut used_q[q], true) {
                return Err(VopError::Validation(format!(
                    "positive ({p}, {q}) breaks the one-to-one constraint"
                )));
            }
            pairs.push(PatchPairLabel { p, q, label: true });
        }
        for &(p, q) in negatives {
            if p >= n_patches || q >= n_patches {
                return Err(VopError::Validation(format!("patch pair ({p}, {q}) out of range")));
            }
            pairs.push(PatchPairLabel { p, q, label: false });
        }
        let overlap_fraction = if n_patches == 0 {
            0.0
        } else {
            positives.len() as f64 / n_patches as f64
        };
        Ok(Self {
            image_pair: (i.into(), j.into()),
            n_patches,
            pairs,
            overlap_fraction,
            valid: None,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn pairs(&self) -> &[PatchPairLabel] {
        &self.pairs
    }

    pub fn overlap_fraction(&self) -> f64 {
        self.overlap_fraction
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().filter(|l| l.label).map(|l| (l.p, l.q))
    }

    pub fn negatives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().filter(|l| !l.label).map(|l| (l.p, l.q))
    }

    /// Dense `n × n` label matrix, row-major; every pair that is not a
    /// positive is a negative.
    pub fn label_matrix(&self) -> Vec<bool> {
        let n = self.n_patches;
        let mut m = vec![false; n * n];
        for (p, q) in self.positives() {
            m[p * n + q] = true;
        }
        m
    }

    /// Label matrix of the reversed pair `(j, i)`.
    pub fn transposed(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|l| PatchPairLabel { p: l.q, q: l.p, label: l.label })
            .collect();
        Self {
            image_pair: (self.image_pair.1.clone(), self.image_pair.0.clone()),
            n_patches: self.n_patches,
            pairs,
            overlap_fraction: self.overlap_fraction,
            valid: self.valid.clone().map(|(a, b)| (b, a)),
        }
    }

    /// Adds up to `count` negatives drawn uniformly from the non-positive
    /// pairs whose patches both carry valid geometry.
    pub fn sample_negatives<R: Rng>(&mut self, count: usize, rng: &mut R) {
        let n = self.n_patches;
        let labels = self.label_matrix();
        let (valid_i, valid_j) = self
            .valid
            .clone()
            .unwrap_or_else(|| (vec![true; n], vec![true; n]));
        let candidates: Vec<(usize, usize)> = (0..n)
            .filter(|p| valid_i[*p])
            .flat_map(|p| (0..n).map(move |q| (p, q)))
            .filter(|(p, q)| valid_j[*q] && !labels[p * n + q])
            .collect();
        let take = count.min(candidates.len());
        let mut picked: Vec<usize> = sample(rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        self.pairs.retain(|l| l.label);
        self.pairs.extend(picked.into_iter().map(|k| {
            let (p, q) = candidates[k];
            PatchPairLabel { p, q, label: false }
        }));
    }

    pub fn to_record(&self) -> SupervisionRecord {
        SupervisionRecord {
            i: self.image_pair.0.clone(),
            j: self.image_pair.1.clone(),
            pos: self.positives().map(|(p, q)| [p, q]).collect(),
            neg_sampled: self.negatives().map(|(p, q)| [p, q]).collect(),
            overlap_fraction: self.overlap_fraction,
        }
    }

    pub fn from_record(rec: &SupervisionRecord, n_patches: usize) -> Result<Self> {
        let pos: Vec<_> = rec.pos.iter().map(|[p, q]| (*p, *q)).collect();
        let neg: Vec<_> = rec.neg_sampled.iter().map(|[p, q]| (*p, *q)).collect();
        let set = Self::new(rec.i.clone(), rec.j.clone(), n_patches, &pos, &neg)?;
        if (set.overlap_fraction - rec.overlap_fraction).abs() > 1e-9 {
            return Err(VopError::Validation(format!(
                "pair ({}, {}): overlap_fraction {} disagrees with {} positives",
                rec.i,
                rec.j,
                rec.overlap_fraction,
                pos.len()
            )));
        }
        Ok(set)
    }
}

/// Row-wise argmax over a dense count matrix; `None` for empty rows, lowest
/// column on ties.
fn best_per_row(counts: &[u32], n: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|p| {
            let row = &counts[p * n..(p + 1) * n];
            let mut best: Option<(usize, u32)> = None;
            for (q, &c) in row.iter().enumerate() {
                if c > 0 && best.is_none_or(|(_, b)| c > b) {
                    best = Some((q, c));
                }
            }
            best.map(|(q, _)| q)
        })
        .collect()
}

fn transpose_counts(counts: &[u32], n: usize) -> Vec<u32> {
    let mut t = vec![0; n * n];
    for p in 0..n {
        for q in 0..n {
            t[q * n + p] = counts[p * n + q];
        }
    }
    t
}

/// Mutual assignment: `(p, q)` survives when `q` is the best partner of `p`
/// in `forward` and `p` is the best partner of `q` in `backward`.
fn mutual_best(forward: &[u32], backward: &[u32], n: usize) -> Vec<(usize, usize)> {
    let fwd = best_per_row(forward, n);
    let bwd = best_per_row(backward, n);
    fwd.iter()
        .enumerate()
        .filter_map(|(p, q)| q.filter(|q| bwd[*q] == Some(p)).map(|q| (p, q)))
        .collect()
}

struct DirectionalCounts {
    counts: Vec<u32>,
    valid_src: Vec<bool>,
}

/// Dense pixel correspondences from `src` to `dst` that survive visibility,
/// depth consistency and the round-trip check, histogrammed per patch pair.
fn directional_counts(
    depth_src: &DepthMap,
    depth_dst: &DepthMap,
    cam_src: &CameraModel,
    cam_dst: &CameraModel,
    grid: &PatchGrid,
    cfg: &SupervisionConfig,
) -> DirectionalCounts {
    let n = grid.n_patches();
    let side = grid.image_side();
    let mut counts = vec![0u32; n * n];
    let mut valid_src = vec![false; n];
    let stride = cfg.stride.max(1) as usize;
    for y in (0..side).step_by(stride) {
        for x in (0..side).step_by(stride) {
            let Some(d) = depth_src.at(x as i64, y as i64) else {
                continue;
            };
            let origin = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let Some(p) = patch_of_pixel(&origin, grid) else {
                continue;
            };
            valid_src[p] = true;
            let world = cam_src.unproject(origin.x, origin.y, d);
            let z_dst = cam_dst.world_to_camera(&world).z;
            let Some(px) = project_point(&world, cam_dst) else {
                continue;
            };
            let Some(q) = patch_of_pixel(&px, grid) else {
                continue;
            };
            let Some(d_dst) = depth_dst.sample(px.x, px.y) else {
                continue;
            };
            if (z_dst - d_dst).abs() > cfg.depth_tol * d_dst {
                continue;
            }
            let back_world = cam_dst.unproject(px.x, px.y, d_dst);
            let Some(back) = project_point(&back_world, cam_src) else {
                continue;
            };
            if (back - origin).norm() >= cfg.pixel_tol {
                continue;
            }
            counts[p * n + q] += 1;
        }
    }
    DirectionalCounts { counts, valid_src }
}

/// Patch supervision from two posed depth maps.
///
/// Correspondences are sampled densely in both directions; a patch pair is a
/// positive when it is the mutual best (most correspondences) in `i → j` and
/// `j → i`.
#[allow(clippy::too_many_arguments)]
pub fn build_supervision_depth(
    id_i: &str,
    id_j: &str,
    depth_i: &DepthMap,
    depth_j: &DepthMap,
    cam_i: &CameraModel,
    cam_j: &CameraModel,
    grid: &PatchGrid,
    cfg: &SupervisionConfig,
) -> Result<GtMatchSet> {
    for (id, d) in [(id_i, depth_i), (id_j, depth_j)] {
        if d.width() != grid.image_side() || d.height() != grid.image_side() {
            return Err(VopError::Validation(format!(
                "depth map of `{id}` is {}x{}, expected {}x{}",
                d.width(),
                d.height(),
                grid.image_side(),
                grid.image_side()
            )));
        }
    }
    let n = grid.n_patches();
    let fwd = directional_counts(depth_i, depth_j, cam_i, cam_j, grid, cfg);
    let bwd = directional_counts(depth_j, depth_i, cam_j, cam_i, grid, cfg);
    let positives = mutual_best(&fwd.counts, &bwd.counts, n);
    let mut set = GtMatchSet::new(id_i, id_j, n, &positives, &[])?;
    set.valid = Some((fwd.valid_src, bwd.valid_src));
    Ok(set)
}

/// Patch supervision from pixel correspondences (e.g. a dense matcher):
/// a patch pair is a candidate when it holds more than `min_count`
/// correspondences, and candidates are reduced to mutual best pairs.
/// Correspondences outside the image are ignored.
pub fn build_supervision_matches(
    id_i: &str,
    id_j: &str,
    correspondences: &[(Vector2<f64>, Vector2<f64>)],
    grid: &PatchGrid,
    min_count: u32,
) -> GtMatchSet {
    let n = grid.n_patches();
    let mut counts = vec![0u32; n * n];
    for (a, b) in correspondences {
        if let (Some(p), Some(q)) = (patch_of_pixel(a, grid), patch_of_pixel(b, grid)) {
            counts[p * n + q] += 1;
        }
    }
    counts.iter_mut().for_each(|c| {
        if *c <= min_count {
            *c = 0;
        }
    });
    let positives = mutual_best(&counts, &transpose_counts(&counts, n), n);
    GtMatchSet::new(id_i, id_j, n, &positives, &[])
        .expect("mutual best pairs are one-to-one")
}

/// Minimum number of correspondences a patch pair must exceed to count as
/// matched when labels come from a dense matcher.
pub const DEFAULT_MIN_MATCHES: u32 = 5;
