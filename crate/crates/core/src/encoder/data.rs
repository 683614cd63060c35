//! Training data: per-image backbone features, per-pair supervision and the
//! batch sampler.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::LossConfig;
use crate::error::{Result, VopError};
use crate::geometry::GtMatchSet;
use crate::posegraph::UnionFind;
use crate::types::ImageFeatures;

#[derive(Clone, Debug)]
struct PairEntry {
    query: usize,
    db: usize,
    positives: Arc<Vec<(usize, usize)>>,
    overlap_fraction: f64,
}

/// One training example: an image pair and its positive patch pairs (all
/// other pairs are negatives).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub query: usize,
    pub db: usize,
    pub positives: Arc<Vec<(usize, usize)>>,
    pub negative_image_pair: bool,
}

impl Sample {
    pub fn label_matrix(&self, n_patches: usize) -> Vec<bool> {
        let mut m = vec![false; n_patches * n_patches];
        for (p, q) in self.positives.iter() {
            m[p * n_patches + q] = true;
        }
        m
    }
}

/// Features plus supervision, viewed through a subset of scenes.
///
/// Scenes are the connected components of the supervision graph: two images
/// share a scene when some chain of supervised pairs links them.
#[derive(Clone, Debug)]
pub struct TrainingDataset {
    features: Arc<Vec<Array2<f32>>>,
    ids: Arc<Vec<String>>,
    scene: Arc<Vec<usize>>,
    n_patches: usize,
    pairs: Vec<PairEntry>,
    images: Vec<usize>,
}

impl TrainingDataset {
    pub fn new(features: Vec<ImageFeatures>, supervision: &[GtMatchSet]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(VopError::Validation("training set has no images".into()));
        };
        let n_patches = first.n_patches();
        let dim = first.dim();
        let mut index = HashMap::new();
        for (k, f) in features.iter().enumerate() {
            if f.n_patches() != n_patches || f.dim() != dim {
                return Err(VopError::DimensionMismatch {
                    context: "training feature shape",
                    expected: n_patches * dim,
                    actual: f.n_patches() * f.dim(),
                });
            }
            if index.insert(f.image_id.clone(), k).is_some() {
                return Err(VopError::Validation(format!("duplicate image `{}`", f.image_id)));
            }
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| VopError::UnknownImage(id.to_string()))
        };
        let mut uf = UnionFind::new(features.len());
        let mut pairs = Vec::with_capacity(supervision.len());
        for set in supervision {
            if set.n_patches() != n_patches {
                return Err(VopError::DimensionMismatch {
                    context: "supervision patch count",
                    expected: n_patches,
                    actual: set.n_patches(),
                });
            }
            let (query, db) = (lookup(&set.image_pair.0)?, lookup(&set.image_pair.1)?);
            uf.union(query, db);
            pairs.push(PairEntry {
                query,
                db,
                positives: Arc::new(set.positives().collect()),
                overlap_fraction: set.overlap_fraction(),
            });
        }
        let scene = (0..features.len()).map(|k| uf.find(k)).collect();
        let ids = features.iter().map(|f| f.image_id.clone()).collect();
        let images = (0..features.len()).collect();
        Ok(Self {
            features: Arc::new(features.into_iter().map(|f| f.patch_feats).collect()),
            ids: Arc::new(ids),
            scene: Arc::new(scene),
            n_patches,
            pairs,
            images,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].ncols()
    }

    pub fn features(&self, image: usize) -> &Array2<f32> {
        &self.features[image]
    }

    pub fn image_id(&self, image: usize) -> &str {
        &self.ids[image]
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn scene_count(&self) -> usize {
        let mut s: Vec<_> = self.images.iter().map(|i| self.scene[*i]).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }

    /// Supervised pairs whose overlap fraction lies in the configured range.
    fn eligible_positives(&self, cfg: &LossConfig) -> Vec<&PairEntry> {
        self.pairs
            .iter()
            .filter(|p| {
                !p.positives.is_empty()
                    && p.overlap_fraction >= cfg.overlap_min
                    && p.overlap_fraction <= cfg.overlap_max
            })
            .collect()
    }

    pub fn eligible_positive_count(&self, cfg: &LossConfig) -> usize {
        self.eligible_positives(cfg).len()
    }

    /// Splits whole scenes into a training and a validation view. At least
    /// one scene stays on each side when there are two or more.
    pub fn split_scenes<R: Rng>(&self, val_fraction: f64, rng: &mut R) -> (Self, Self) {
        let mut scenes: Vec<usize> = self.images.iter().map(|i| self.scene[*i]).collect();
        scenes.sort_unstable();
        scenes.dedup();
        scenes.shuffle(rng);
        let mut n_val = (scenes.len() as f64 * val_fraction).round() as usize;
        if scenes.len() >= 2 {
            n_val = n_val.clamp(1, scenes.len() - 1);
        } else {
            n_val = 0;
        }
        let val_scenes: std::collections::HashSet<_> = scenes[..n_val].iter().copied().collect();
        let view = |keep_val: bool| {
            let mut v = self.clone();
            v.images.retain(|i| val_scenes.contains(&self.scene[*i]) == keep_val);
            v.pairs
                .retain(|p| val_scenes.contains(&self.scene[p.query]) == keep_val);
            v
        };
        (view(false), view(true))
    }

    /// Draws a batch: `round(batch_size · negative_fraction)` image pairs from
    /// distinct scenes (every label false), the rest from supervised pairs
    /// within the overlap range. Orientation of positive pairs is randomized.
    pub fn sample_batch<R: Rng>(
        &self,
        cfg: &LossConfig,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        let eligible = self.eligible_positives(cfg);
        if eligible.is_empty() {
            return Err(VopError::Sampling("positive"));
        }
        if self.scene_count() < 2 {
            return Err(VopError::Sampling("negative"));
        }
        let n_neg = (batch_size as f64 * cfg.negative_fraction).round() as usize;
        let mut batch = Vec::with_capacity(batch_size);
        let empty = Arc::new(Vec::new());
        let pick = Uniform::new(0, self.images.len());
        while batch.len() < n_neg {
            let a = self.images[pick.sample(rng)];
            let b = self.images[pick.sample(rng)];
            if self.scene[a] != self.scene[b] {
                batch.push(Sample {
                    query: a,
                    db: b,
                    positives: empty.clone(),
                    negative_image_pair: true,
                });
            }
        }
        while batch.len() < batch_size {
            let e = eligible[rng.gen_range(0..eligible.len())];
            let sample = if rng.gen_bool(0.5) {
                Sample {
                    query: e.query,
                    db: e.db,
                    positives: e.positives.clone(),
                    negative_image_pair: false,
                }
            } else {
                Sample {
                    query: e.db,
                    db: e.query,
                    positives: Arc::new(e.positives.iter().map(|(p, q)| (*q, *p)).collect()),
                    negative_image_pair: false,
                }
            };
            batch.push(sample);
        }
        Ok(batch)
    }
}

/// Feature-space augmentation: a per-image gain drawn from
/// `[1 − strength, 1 + strength]` plus Gaussian noise with standard deviation
/// `strength · std(feats)`.
pub fn augment_features<R: Rng>(feats: &Array2<f64>, rng: &mut R, strength: f64) -> Array2<f64> {
    if strength <= 0.0 || feats.is_empty() {
        return feats.clone();
    }
    let n = feats.len() as f64;
    let mean = feats.sum() / n;
    let std = (feats.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let gain = rng.gen_range(1.0 - strength..=1.0 + strength);
    if std == 0.0 {
        return feats * gain;
    }
    let noise = Normal::new(0.0, strength * std).expect("finite std");
    feats.mapv(|v| gain * v + noise.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PatchGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn features(ids: &[&str]) -> Vec<ImageFeatures> {
        let grid = PatchGrid::new(28, 14).unwrap();
        ids.iter()
            .enumerate()
            .map(|(k, id)| ImageFeatures::new(*id, grid, Array2::from_elem((4, 3), k as f32), None).unwrap())
            .collect()
    }

    fn set(i: &str, j: &str, pos: &[(usize, usize)]) -> GtMatchSet {
        GtMatchSet::new(i, j, 4, pos, &[]).unwrap()
    }

    fn dataset() -> TrainingDataset {
        // two scenes: {a, b} and {c, d}
        TrainingDataset::new(
            features(&["a", "b", "c", "d"]),
            &[set("a", "b", &[(0, 1)]), set("c", "d", &[(0, 0), (1, 1)])],
        )
        .unwrap()
    }

    #[test]
    fn scenes_come_from_supervision_components() {
        let ds = dataset();
        assert_eq!(ds.scene_count(), 2);
        assert_eq!(ds.eligible_positive_count(&LossConfig::default()), 2);
        let (train, val) = ds.split_scenes(0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(train.scene_count(), 1);
        assert_eq!(val.scene_count(), 1);
        assert_eq!(train.image_count() + val.image_count(), 4);
    }

    #[test]
    fn only_negative_pairs_is_an_error() {
        let ds = TrainingDataset::new(features(&["a", "b", "c"]), &[set("a", "b", &[])]).unwrap();
        let err = ds
            .sample_batch(&LossConfig::default(), 8, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, VopError::Sampling("positive")));
        assert!(err.to_string().contains("positive"));
    }

    #[test]
    fn single_scene_has_no_negatives() {
        let ds = TrainingDataset::new(features(&["a", "b"]), &[set("a", "b", &[(0, 0)])]).unwrap();
        assert!(matches!(
            ds.sample_batch(&LossConfig::default(), 8, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(VopError::Sampling("negative"))
        ));
    }

    #[test]
    fn batch_of_64_is_half_negative() {
        let ds = dataset();
        let batch = ds
            .sample_batch(&LossConfig::default(), 64, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(batch.len(), 64);
        let negs: Vec<_> = batch.iter().filter(|s| s.negative_image_pair).collect();
        assert_eq!(negs.len(), 32);
        for s in &negs {
            assert!(s.positives.is_empty());
            assert_ne!(ds.scene[s.query], ds.scene[s.db]);
        }
        for s in batch.iter().filter(|s| !s.negative_image_pair) {
            assert_eq!(ds.scene[s.query], ds.scene[s.db]);
            assert!(!s.positives.is_empty());
        }
    }

    #[test]
    fn positives_respect_overlap_range() {
        // overlap fractions 0/4 .. 4/4 across five scenes of two images
        let ids: Vec<String> = (0..10).map(|k| format!("i{k}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let sets: Vec<_> = (0..5)
            .map(|k| {
                let pos: Vec<_> = (0..k.min(4)).map(|p| (p, p)).collect();
                set(&ids[2 * k], &ids[2 * k + 1], &pos)
            })
            .collect();
        let ds = TrainingDataset::new(features(&id_refs), &sets).unwrap();
        let cfg = LossConfig { overlap_min: 0.3, overlap_max: 0.6, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            for s in ds.sample_batch(&cfg, 10, &mut rng).unwrap() {
                if !s.negative_image_pair {
                    assert_eq!(s.positives.len(), 2);
                }
            }
        }
    }

    #[test]
    fn augmentation_identity_determinism_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_simple_fn((64, 32), || normal.sample(&mut rng));
        assert_eq!(augment_features(&x, &mut rng, 0.0), x);
        let a = augment_features(&x, &mut ChaCha8Rng::seed_from_u64(3), 0.1);
        let b = augment_features(&x, &mut ChaCha8Rng::seed_from_u64(3), 0.1);
        assert_eq!(a, b);
        assert_ne!(a, x);
    }
}
