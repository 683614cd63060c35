use serde::{Deserialize, Serialize};

use super::{Neighbor, PatchIndex};
use crate::error::{Result, VopError};
use crate::types::{similarity, ImageEmbeddings};

/// Default size of the global-embedding shortlist.
pub const DEFAULT_SHORTLIST: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    /// `Σ w·⟦δ ≥ ε⟧`
    #[default]
    Hard,
    /// `Σ w·max(δ − ε, 0)`
    Soft,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Tfidf,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalOptions {
    pub epsilon: f64,
    pub mode: VoteMode,
    pub weighting: Weighting,
    pub prefilter: bool,
    pub shortlist: usize,
}

impl RetrievalOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            mode: VoteMode::Hard,
            weighting: Weighting::Tfidf,
            prefilter: true,
            shortlist: DEFAULT_SHORTLIST,
        }
    }
}

/// Overlap estimate between a query and one database image.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapScore {
    pub query_id: String,
    pub db: usize,
    pub db_id: String,
    pub score: f64,
    pub mode: VoteMode,
    /// Correspondences `(query patch, db patch, δ)`, one per query patch.
    pub matches: Vec<(usize, usize, f64)>,
    /// Global-embedding similarity, used to break score ties.
    pub cls_sim: f64,
}

/// Neighbor statistics of the query patches over a candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfStats {
    /// Neighbors per query patch, counted one-to-many.
    pub n_id: Vec<usize>,
    /// Candidate images holding at least one neighbor, per query patch.
    pub n_i: Vec<usize>,
    pub n_d: usize,
    pub n_images: usize,
}

impl TfidfStats {
    pub fn from_neighbors(neighbors: &[Vec<Neighbor>], n_images: usize, n_patches: usize) -> Self {
        let mut n_id = Vec::with_capacity(neighbors.len());
        let mut n_i = Vec::with_capacity(neighbors.len());
        let mut images = Vec::new();
        for list in neighbors {
            images.clear();
            images.extend(list.iter().map(|nb| nb.image));
            images.sort_unstable();
            images.dedup();
            n_id.push(list.len());
            n_i.push(images.len());
        }
        Self {
            n_id,
            n_i,
            n_d: n_patches * n_images,
            n_images,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.n_id
            .iter()
            .zip(&self.n_i)
            .map(|(a, b)| tfidf_weight(*a, *b, self.n_d, self.n_images))
            .collect()
    }
}

/// `t = (n_id / n_d)·ln(N / n_i)`, zero when `n_i = 0`.
pub fn tfidf_weight(n_id: usize, n_i: usize, n_d: usize, n_images: usize) -> f64 {
    if n_i == 0 || n_d == 0 {
        return 0.0;
    }
    (n_id as f64 / n_d as f64) * (n_images as f64 / n_i as f64).ln()
}

/// TF-IDF weight of every query patch from its neighbor list.
pub fn tfidf_weights(neighbors: &[Vec<Neighbor>], n_images: usize, n_patches: usize) -> Vec<f64> {
    TfidfStats::from_neighbors(neighbors, n_images, n_patches).weights()
}

/// Weights to vote with: `None` (unit weights) for uniform weighting or when
/// every TF-IDF weight is zero.
pub fn effective_weights(tfidf: &[f64], weighting: Weighting) -> Option<Vec<f64>> {
    match weighting {
        Weighting::Uniform => None,
        Weighting::Tfidf => tfidf.iter().any(|t| *t != 0.0).then(|| tfidf.to_vec()),
    }
}

/// Best neighbor per query patch: highest δ, ties by lower db patch.
fn better(cur: Option<(usize, f64)>, patch: usize, sim: f64) -> bool {
    match cur {
        None => true,
        Some((q, s)) => sim > s || (sim == s && patch < q),
    }
}

fn score_best(
    best: &[Option<(usize, f64)>],
    eps: f64,
    mode: VoteMode,
    weights: Option<&[f64]>,
) -> (f64, Vec<(usize, usize, f64)>) {
    let mut score = 0.0;
    let mut matches = Vec::new();
    for (p, b) in best.iter().enumerate() {
        let Some((q, sim)) = *b else {
            continue;
        };
        let w = weights.map_or(1.0, |w| w[p]);
        score += match mode {
            VoteMode::Hard => {
                if sim >= eps {
                    w
                } else {
                    0.0
                }
            }
            VoteMode::Soft => w * (sim - eps).max(0.0),
        };
        matches.push((p, q, sim));
    }
    (score, matches)
}

/// Scores one database image from the query patches' neighbor lists (hits in
/// other images are ignored).
pub fn vote_overlap(
    query: &ImageEmbeddings,
    index: &PatchIndex,
    db_image: usize,
    neighbors: &[Vec<Neighbor>],
    eps: f64,
    mode: VoteMode,
    weights: Option<&[f64]>,
) -> OverlapScore {
    let mut best = vec![None; neighbors.len()];
    for (p, list) in neighbors.iter().enumerate() {
        for nb in list.iter().filter(|nb| nb.image == db_image) {
            if better(best[p], nb.patch, nb.sim) {
                best[p] = Some((nb.patch, nb.sim));
            }
        }
    }
    let (score, matches) = score_best(&best, eps, mode, weights);
    OverlapScore {
        query_id: query.image_id().to_string(),
        db: db_image,
        db_id: index.image_id(db_image).to_string(),
        score,
        mode,
        matches,
        cls_sim: cls_similarity(query, index, db_image),
    }
}

fn cls_similarity(query: &ImageEmbeddings, index: &PatchIndex, db: usize) -> f64 {
    match (query.cls_emb(), index.cls(db)) {
        (Some(q), Some(d)) => similarity(q.view(), ndarray::ArrayView1::from(d)),
        _ => 0.0,
    }
}

/// Ranks database images by estimated overlap with `query`: optional
/// global prefilter, radius search, TF-IDF weighting, voting, then sorting by
/// score, global similarity and ordinal.
pub fn retrieve_topk(
    query: &ImageEmbeddings,
    index: &PatchIndex,
    k: usize,
    opts: &RetrievalOptions,
) -> Result<Vec<OverlapScore>> {
    if k == 0 || index.is_empty() {
        return Ok(Vec::new());
    }
    if query.dim() != index.dim() || Some(query.grid()) != index.grid() {
        return Err(VopError::DimensionMismatch {
            context: "query vs index embedding shape",
            expected: index.n_patches() * index.dim(),
            actual: query.n_patches() * query.dim(),
        });
    }
    let candidates: Vec<usize> = if opts.prefilter {
        let cls = query.cls_emb().ok_or_else(|| {
            VopError::Validation(format!("query `{}` has no global embedding", query.image_id()))
        })?;
        let mut c: Vec<usize> = index
            .cls_prefilter(cls.view(), opts.shortlist)?
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        c.sort_unstable();
        c
    } else {
        (0..index.len()).collect()
    };
    let restrict = (candidates.len() < index.len()).then_some(candidates.as_slice());
    let neighbors: Vec<Vec<Neighbor>> = (0..query.n_patches())
        .map(|p| {
            if query.is_degenerate(p) {
                Vec::new()
            } else {
                index.radius_neighbors(query.patch(p), opts.epsilon, restrict)
            }
        })
        .collect();
    let tfidf = tfidf_weights(&neighbors, candidates.len(), index.n_patches());
    let weights = effective_weights(&tfidf, opts.weighting);

    let mut slot = vec![usize::MAX; index.len()];
    candidates.iter().enumerate().for_each(|(s, i)| slot[*i] = s);
    let mut best = vec![vec![None; query.n_patches()]; candidates.len()];
    for (p, list) in neighbors.iter().enumerate() {
        for nb in list {
            let b = &mut best[slot[nb.image]][p];
            if better(*b, nb.patch, nb.sim) {
                *b = Some((nb.patch, nb.sim));
            }
        }
    }
    let mut scores: Vec<OverlapScore> = candidates
        .iter()
        .zip(&best)
        .map(|(&db, b)| {
            let (score, matches) = score_best(b, opts.epsilon, opts.mode, weights.as_deref());
            OverlapScore {
                query_id: query.image_id().to_string(),
                db,
                db_id: index.image_id(db).to_string(),
                score,
                mode: opts.mode,
                matches,
                cls_sim: cls_similarity(query, index, db),
            }
        })
        .collect();
    rank_scores(&mut scores);
    scores.truncate(k);
    Ok(scores)
}

/// Sorts by score, then global similarity (both descending), then ordinal.
pub fn rank_scores(scores: &mut [OverlapScore]) {
    scores.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.cls_sim.total_cmp(&a.cls_sim))
            .then(a.db.cmp(&b.db))
    });
}
