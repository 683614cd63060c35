//! Retrieval quality against ground-truth image overlaps and patch matches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VopError};
use crate::io::{atomic_write, OverlapRecord, RetrievalRecord, SupervisionRecord};

/// Set of image pairs whose ground-truth overlap reaches a threshold.
#[derive(Clone, Debug, Default)]
pub struct GtPositives {
    pairs: HashSet<(String, String)>,
}

impl GtPositives {
    pub fn from_overlaps(records: &[OverlapRecord], threshold: u64) -> Self {
        let mut pairs = HashSet::new();
        for r in records.iter().filter(|r| r.overlap >= threshold) {
            pairs.insert((r.i.clone(), r.j.clone()));
            pairs.insert((r.j.clone(), r.i.clone()));
        }
        Self { pairs }
    }

    pub fn contains(&self, a: &str, b: &str) -> bool {
        self.pairs.contains(&(a.to_string(), b.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMargin {
    pub query: String,
    /// Best-ranked positive score minus best-ranked negative score.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub n_queries: usize,
    /// Fraction of queries whose top-k holds at least one positive.
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Predicted patch correspondences against supervision positives,
    /// averaged over retrieved pairs that have supervision.
    pub mean_patch_precision: Option<f64>,
    pub mean_patch_recall: Option<f64>,
    pub score_margins: Vec<QueryMargin>,
}

/// Computes recall@k for every `k` in `ks` and, when supervision is given,
/// patch-level precision and recall of the voted correspondences. With
/// `exclude_self`, a query's own image is dropped from its ranking first.
pub fn evaluate_retrievals(
    retrievals: &[RetrievalRecord],
    gt: &GtPositives,
    supervision: Option<&[SupervisionRecord]>,
    ks: &[usize],
    exclude_self: bool,
) -> Result<RetrievalMetrics> {
    if ks.contains(&0) {
        return Err(VopError::Validation("recall@0 is undefined".into()));
    }
    let sup: HashMap<(&str, &str), &SupervisionRecord> = supervision
        .unwrap_or_default()
        .iter()
        .map(|r| ((r.i.as_str(), r.j.as_str()), r))
        .collect();
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|k| (*k, 0)).collect();
    let (mut precisions, mut recalls) = (Vec::new(), Vec::new());
    let mut margins = Vec::new();
    for rec in retrievals {
        let ranked: Vec<_> = rec
            .ranked
            .iter()
            .filter(|e| !(exclude_self && e.db == rec.query))
            .collect();
        let first_pos = ranked.iter().position(|e| gt.contains(&rec.query, &e.db));
        for (k, h) in hits.iter_mut() {
            if first_pos.is_some_and(|p| p < *k) {
                *h += 1;
            }
        }
        let best_neg = ranked.iter().find(|e| !gt.contains(&rec.query, &e.db));
        if let (Some(p), Some(n)) = (first_pos, best_neg) {
            margins.push(QueryMargin {
                query: rec.query.clone(),
                margin: ranked[p].score - n.score,
            });
        }
        for e in &ranked {
            let positives: HashSet<(usize, usize)> =
                if let Some(s) = sup.get(&(rec.query.as_str(), e.db.as_str())) {
                    s.pos.iter().map(|[p, q]| (*p, *q)).collect()
                } else if let Some(s) = sup.get(&(e.db.as_str(), rec.query.as_str())) {
                    s.pos.iter().map(|[p, q]| (*q, *p)).collect()
                } else {
                    continue;
                };
            let correct = e
                .matches
                .iter()
                .filter(|(p, q, _)| positives.contains(&(*p, *q)))
                .count() as f64;
            if !e.matches.is_empty() {
                precisions.push(correct / e.matches.len() as f64);
            }
            if !positives.is_empty() {
                recalls.push(correct / positives.len() as f64);
            }
        }
    }
    let n = retrievals.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(RetrievalMetrics {
        n_queries: n,
        recall_at_k: hits
            .into_iter()
            .map(|(k, h)| (k, if n > 0 { h as f64 / n as f64 } else { 0.0 }))
            .collect(),
        mean_patch_precision: mean(&precisions),
        mean_patch_recall: mean(&recalls),
        score_margins: margins,
    })
}

/// Writes `k,recall` rows.
pub fn write_recall_csv(path: &Path, metrics: &RetrievalMetrics) -> Result<()> {
    atomic_write(path, |file| {
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["k", "recall"])?;
        for (k, r) in &metrics.recall_at_k {
            w.write_record([k.to_string(), r.to_string()])?;
        }
        w.flush().map_err(|e| VopError::io(path, e))?;
        Ok(())
    })
}
