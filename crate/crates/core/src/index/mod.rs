//! Searchable database of patch embeddings: exact radius search, global
//! prefiltering, TF-IDF weighted voting and ranking.

mod pool;
mod tree;
mod vote;

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;

use crate::error::{Result, VopError};
use crate::io::{read_features, write_features, IndexSidecar};
use crate::types::{dot_slices, similarity, ImageEmbeddings, PatchGrid};
use tree::BallTree;

pub use pool::pool_patches;
pub use vote::{
    effective_weights, rank_scores, retrieve_topk, tfidf_weight, tfidf_weights, vote_overlap, OverlapScore,
    RetrievalOptions, TfidfStats, VoteMode, Weighting, DEFAULT_SHORTLIST,
};

/// Below this many entries a query scans every entry instead of the tree.
const TREE_MIN_ENTRIES: usize = 64;
const LEAF_SIZE: usize = 32;

/// One radius-search hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub entry: usize,
    pub image: usize,
    pub patch: usize,
    pub sim: f64,
}

/// Cosine-similarity threshold for radius search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusThreshold {
    pub epsilon: f64,
}

impl RadiusThreshold {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && (-1.0..=1.0).contains(&epsilon)) {
            return Err(VopError::Validation(format!("radius threshold {epsilon} not in [-1, 1]")));
        }
        Ok(Self { epsilon })
    }
}

/// Flat patch-embedding database. Entry `e` is patch `e % n_patches` of
/// image `e / n_patches`.
#[derive(Clone, Debug)]
pub struct PatchIndex {
    grid: Option<PatchGrid>,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    degenerate: Vec<bool>,
    cls: Vec<Option<Vec<f32>>>,
    tree: BallTree,
}

/// Builds the index. Degenerate patches are stored but never returned.
pub fn build_index(db: &[ImageEmbeddings]) -> Result<PatchIndex> {
    let Some(first) = db.first() else {
        return Ok(PatchIndex {
            grid: None,
            dim: 0,
            ids: Vec::new(),
            data: Vec::new(),
            degenerate: Vec::new(),
            cls: Vec::new(),
            tree: BallTree::build(&[], 1, Vec::new(), LEAF_SIZE),
        });
    };
    let (grid, dim) = (first.grid(), first.dim());
    let n = grid.n_patches();
    let mut data = Vec::with_capacity(db.len() * n * dim);
    let mut degenerate = Vec::with_capacity(db.len() * n);
    let mut ids = Vec::with_capacity(db.len());
    let mut cls = Vec::with_capacity(db.len());
    for img in db {
        if img.grid() != grid || img.dim() != dim {
            return Err(VopError::DimensionMismatch {
                context: "database embedding shape",
                expected: n * dim,
                actual: img.n_patches() * img.dim(),
            });
        }
        data.extend(img.patch_embs().iter());
        degenerate.extend((0..n).map(|p| img.is_degenerate(p)));
        ids.push(img.image_id().to_string());
        cls.push(img.cls_emb().map(|c| c.to_vec()));
    }
    let members: Vec<u32> = (0..degenerate.len() as u32)
        .filter(|e| !degenerate[*e as usize])
        .collect();
    let tree = BallTree::build(&data, dim, members, LEAF_SIZE);
    Ok(PatchIndex {
        grid: Some(grid),
        dim,
        ids,
        data,
        degenerate,
        cls,
        tree,
    })
}

impl PatchIndex {
    /// Number of database images, `N`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.degenerate.len()
    }

    pub fn grid(&self) -> Option<PatchGrid> {
        self.grid
    }

    pub fn n_patches(&self) -> usize {
        self.grid.map_or(0, |g| g.n_patches())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn image_id(&self, image: usize) -> &str {
        &self.ids[image]
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn entry(&self, e: usize) -> &[f32] {
        &self.data[e * self.dim..(e + 1) * self.dim]
    }

    pub fn is_degenerate(&self, e: usize) -> bool {
        self.degenerate[e]
    }

    pub fn cls(&self, image: usize) -> Option<&[f32]> {
        self.cls[image].as_deref()
    }

    pub fn has_cls(&self) -> bool {
        !self.cls.is_empty() && self.cls.iter().all(Option::is_some)
    }

    fn neighbor(&self, e: usize, sim: f64) -> Neighbor {
        let n = self.n_patches();
        Neighbor {
            entry: e,
            image: e / n,
            patch: e % n,
            sim,
        }
    }

    /// All non-degenerate entries with similarity `≥ eps` to `q`, restricted
    /// to the listed images when `restrict` is given, sorted by entry.
    pub fn radius_neighbors(
        &self,
        q: ArrayView1<'_, f32>,
        eps: f64,
        restrict: Option<&[usize]>,
    ) -> Vec<Neighbor> {
        if self.is_empty() {
            return Vec::new();
        }
        let q = q.to_vec();
        let n = self.n_patches();
        let mut out = Vec::new();
        let direct = match restrict {
            Some(r) => r.len() * 4 < self.len() || self.tree.len() < TREE_MIN_ENTRIES,
            None => self.tree.len() < TREE_MIN_ENTRIES,
        };
        if direct {
            let scan = |image: usize, out: &mut Vec<Neighbor>| {
                for e in image * n..(image + 1) * n {
                    if self.degenerate[e] {
                        continue;
                    }
                    let s = dot_slices(&q, self.entry(e));
                    if s >= eps {
                        out.push(self.neighbor(e, s));
                    }
                }
            };
            match restrict {
                Some(r) => {
                    let mut images = r.to_vec();
                    images.sort_unstable();
                    images.dedup();
                    images.into_iter().for_each(|i| scan(i, &mut out));
                }
                None => (0..self.len()).for_each(|i| scan(i, &mut out)),
            }
        } else {
            let mask = restrict.map(|r| {
                let mut m = vec![false; self.len()];
                r.iter().for_each(|i| m[*i] = true);
                m
            });
            self.tree.query(
                &self.data,
                self.dim,
                &q,
                eps,
                |e| mask.as_ref().is_none_or(|m| m[e as usize / n]),
                |e, s| out.push(self.neighbor(e as usize, s)),
            );
            out.sort_unstable_by_key(|nb| nb.entry);
        }
        out
    }

    /// Reference implementation of [`PatchIndex::radius_neighbors`]: a scan
    /// over every entry.
    pub fn linear_scan(
        &self,
        q: ArrayView1<'_, f32>,
        eps: f64,
        restrict: Option<&[usize]>,
    ) -> Vec<Neighbor> {
        let n = self.n_patches().max(1);
        (0..self.entry_count())
            .filter(|e| !self.degenerate[*e])
            .filter(|e| restrict.is_none_or(|r| r.contains(&(e / n))))
            .filter_map(|e| {
                let s = similarity(q, ArrayView1::from(self.entry(e)));
                (s >= eps).then(|| self.neighbor(e, s))
            })
            .collect()
    }

    /// Database images ranked by global-embedding similarity to `query_cls`,
    /// descending, ties by lower ordinal; at most `shortlist` of them.
    pub fn cls_prefilter(
        &self,
        query_cls: ArrayView1<'_, f32>,
        shortlist: usize,
    ) -> Result<Vec<(usize, f64)>> {
        let mut scored = Vec::with_capacity(self.len());
        for (k, c) in self.cls.iter().enumerate() {
            let c = c.as_ref().ok_or_else(|| {
                VopError::Validation(format!("database image `{}` has no global embedding", self.ids[k]))
            })?;
            scored.push((k, similarity(query_cls, ArrayView1::from(c.as_slice()))));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(shortlist.min(self.len()));
        Ok(scored)
    }

    /// The database as embeddings again, in ordinal order.
    pub fn to_embeddings(&self) -> Result<Vec<ImageEmbeddings>> {
        let Some(grid) = self.grid else {
            return Ok(Vec::new());
        };
        let n = grid.n_patches();
        (0..self.len())
            .map(|i| {
                let rows = Array2::from_shape_vec(
                    (n, self.dim),
                    self.data[i * n * self.dim..(i + 1) * n * self.dim].to_vec(),
                )
                .expect("shape");
                let feats = crate::types::ImageFeatures {
                    image_id: self.ids[i].clone(),
                    grid,
                    patch_feats: rows,
                    cls_feat: self.cls[i].clone().map(Into::into),
                };
                ImageEmbeddings::from_features(&feats)
            })
            .collect()
    }

    /// Per entry, the number of database images holding at least one
    /// neighbor within `eps`.
    pub fn document_frequencies(&self, eps: f64) -> Vec<u32> {
        let mut seen = vec![usize::MAX; self.len()];
        (0..self.entry_count())
            .map(|e| {
                if self.degenerate[e] {
                    return 0;
                }
                let mut count = 0;
                for nb in self.radius_neighbors(ArrayView1::from(self.entry(e)), eps, None) {
                    if seen[nb.image] != e {
                        seen[nb.image] = e;
                        count += 1;
                    }
                }
                count
            })
            .collect()
    }
}

/// Median of `sample_count` random query-patch / database-patch similarities,
/// rounded to two decimals. Degenerate patches are not sampled.
pub fn calibrate_radius<R: Rng>(
    query: &[ImageEmbeddings],
    db: &[ImageEmbeddings],
    sample_count: usize,
    rng: &mut R,
) -> Result<RadiusThreshold> {
    let live = |set: &[ImageEmbeddings]| -> Vec<(usize, usize)> {
        set.iter()
            .enumerate()
            .flat_map(|(i, e)| (0..e.n_patches()).filter(|p| !e.is_degenerate(*p)).map(move |p| (i, p)))
            .collect()
    };
    let (lq, ld) = (live(query), live(db));
    if lq.is_empty() || ld.is_empty() || sample_count == 0 {
        return Err(VopError::Validation(
            "radius calibration needs non-degenerate patches on both sides".into(),
        ));
    }
    let mut sims: Vec<f64> = (0..sample_count)
        .map(|_| {
            let (qi, qp) = lq[rng.gen_range(0..lq.len())];
            let (di, dp) = ld[rng.gen_range(0..ld.len())];
            similarity(query[qi].patch(qp), db[di].patch(dp))
        })
        .collect();
    sims.sort_by(f64::total_cmp);
    let m = sims.len();
    let median = if m % 2 == 1 {
        sims[m / 2]
    } else {
        0.5 * (sims[m / 2 - 1] + sims[m / 2])
    };
    RadiusThreshold::new(((median * 100.0).round() / 100.0).clamp(-1.0, 1.0))
}

/// Persists an index as an embedding file plus a JSON sidecar.
pub fn save_index(
    index: &PatchIndex,
    sidecar: &IndexSidecar,
    embeddings_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    let feats: Vec<_> = index
        .to_embeddings()?
        .into_iter()
        .map(ImageEmbeddings::into_features)
        .collect();
    write_features(&feats, embeddings_path)?;
    let mut bytes = serde_json::to_vec_pretty(sidecar)?;
    bytes.push(b'\n');
    crate::io::atomic_write_bytes(sidecar_path, &bytes)
}

/// Loads an index written by [`save_index`], checking the sidecar against
/// the embeddings.
pub fn load_index(embeddings_path: &Path, sidecar_path: &Path) -> Result<(PatchIndex, IndexSidecar)> {
    let text = std::fs::read_to_string(sidecar_path).map_err(|e| VopError::io(sidecar_path, e))?;
    let sidecar: IndexSidecar = serde_json::from_str(&text)?;
    let grid = PatchGrid::new(sidecar.image_side, sidecar.patch_side)?;
    let embs = read_features(embeddings_path)?
        .into_iter()
        .map(|mut f| {
            if f.n_patches() != grid.n_patches() {
                return Err(VopError::DimensionMismatch {
                    context: "index grid vs embedding file",
                    expected: grid.n_patches(),
                    actual: f.n_patches(),
                });
            }
            f.grid = grid;
            ImageEmbeddings::from_features(&f)
        })
        .collect::<Result<Vec<_>>>()?;
    if embs.len() != sidecar.n_images {
        return Err(VopError::Validation(format!(
            "sidecar lists {} images, embedding file has {}",
            sidecar.n_images,
            embs.len()
        )));
    }
    Ok((build_index(&embs)?, sidecar))
}
