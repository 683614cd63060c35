use nalgebra::Vector3;

use super::{patch_of_pixel, project_point};
use crate::types::{CameraModel, PatchGrid};

/// Co-visibility counts between the patches of two images: entry `(p, q)` is
/// the number of 3D points seen in patch `p` of the first image and patch `q`
/// of the second.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapMatrix {
    n_patches: usize,
    counts: Vec<u32>,
    pub image_pair: (String, String),
}

impl OverlapMatrix {
    pub fn zeros(n_patches: usize) -> Self {
        Self {
            n_patches,
            counts: vec![0; n_patches * n_patches],
            image_pair: Default::default(),
        }
    }

    pub fn with_pair(mut self, i: impl Into<String>, j: impl Into<String>) -> Self {
        self.image_pair = (i.into(), j.into());
        self
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn get(&self, p: usize, q: usize) -> u32 {
        self.counts[p * self.n_patches + q]
    }

    pub fn increment(&mut self, p: usize, q: usize) {
        self.counts[p * self.n_patches + q] += 1;
    }

    pub fn row(&self, p: usize) -> &[u32] {
        &self.counts[p * self.n_patches..(p + 1) * self.n_patches]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|c| *c as u64).sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.n_patches;
        let mut t = Self::zeros(n);
        for p in 0..n {
            for q in 0..n {
                t.counts[q * n + p] = self.counts[p * n + q];
            }
        }
        t.image_pair = (self.image_pair.1.clone(), self.image_pair.0.clone());
        t
    }
}

/// Counts, per patch pair, the points visible inside patch `p` of camera `i`
/// and patch `q` of camera `j`.
pub fn overlap_from_points(
    points: &[Vector3<f64>],
    cam_i: &CameraModel,
    cam_j: &CameraModel,
    grid: &PatchGrid,
) -> OverlapMatrix {
    let mut m = OverlapMatrix::zeros(grid.n_patches());
    for x in points {
        let p = project_point(x, cam_i).and_then(|px| patch_of_pixel(&px, grid));
        let Some(p) = p else { continue };
        if let Some(q) = project_point(x, cam_j).and_then(|px| patch_of_pixel(&px, grid)) {
            m.increment(p, q);
        }
    }
    m
}

/// Image overlap over argmax correspondences: every query patch `p` with a
/// non-empty row is paired with its highest-count patch `q` (lowest `q` on
/// ties) and the score sums those counts.
pub fn image_overlap(m: &OverlapMatrix) -> (u64, Vec<(usize, usize)>) {
    let mut score = 0u64;
    let mut corr = Vec::new();
    for p in 0..m.n_patches() {
        let row = m.row(p);
        let mut best: Option<(usize, u32)> = None;
        for (q, &c) in row.iter().enumerate() {
            if c > 0 && best.is_none_or(|(_, b)| c > b) {
                best = Some((q, c));
            }
        }
        if let Some((q, c)) = best {
            corr.push((p, q));
            score += c as u64;
        }
    }
    (score, corr)
}
