//! Incremental pose-graph construction from retrieval lists: edges are
//! verified in rounds of increasing rank and merged with union-find.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VopError};
use crate::io::{atomic_write, atomic_write_bytes};

/// Disjoint sets with union by size and path compression.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    components: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            components: n,
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`; false when they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] || (self.size[ra] == self.size[rb] && rb < ra) {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        self.components -= 1;
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    pub fn component_count(&self) -> usize {
        self.components
    }

    pub fn component_size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }

    pub fn max_component_size(&self) -> usize {
        (0..self.parent.len())
            .filter(|i| self.parent[*i] == *i)
            .map(|i| self.size[i])
            .max()
            .unwrap_or(0)
    }
}

/// Decides whether a retrieved image pair yields a usable relative pose.
pub trait EdgeVerifier: Sync {
    /// Returns `(verified, inlier_count)`.
    fn verify(&self, query: &str, db: &str) -> (bool, u32);
}

impl<F> EdgeVerifier for F
where
    F: Fn(&str, &str) -> (bool, u32) + Sync,
{
    fn verify(&self, query: &str, db: &str) -> (bool, u32) {
        self(query, db)
    }
}

/// Verifies an edge when its ground-truth image overlap reaches `threshold`,
/// with the verdict flipped with probability `flip_probability`. The flip is
/// a deterministic function of `(seed, query, db)`.
#[derive(Clone, Debug)]
pub struct OverlapVerifier {
    overlaps: HashMap<(String, String), u64>,
    pub threshold: u64,
    pub flip_probability: f64,
    pub seed: u64,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl OverlapVerifier {
    /// `overlaps` lists `(i, j, overlap)`; lookups are symmetric.
    pub fn new(
        overlaps: impl IntoIterator<Item = (String, String, u64)>,
        threshold: u64,
        flip_probability: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(VopError::Validation(format!(
                "flip probability {flip_probability} not in [0, 1]"
            )));
        }
        let mut map = HashMap::new();
        for (i, j, o) in overlaps {
            map.insert((j.clone(), i.clone()), o);
            map.insert((i, j), o);
        }
        Ok(Self {
            overlaps: map,
            threshold,
            flip_probability,
            seed,
        })
    }

    pub fn overlap(&self, a: &str, b: &str) -> u64 {
        self.overlaps
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

impl EdgeVerifier for OverlapVerifier {
    fn verify(&self, query: &str, db: &str) -> (bool, u32) {
        let overlap = self.overlap(query, db);
        let mut verified = overlap >= self.threshold;
        if self.flip_probability > 0.0 {
            let h = fnv1a(
                query.bytes().chain([0xff]).chain(db.bytes()),
                0xcbf2_9ce4_8422_2325 ^ self.seed,
            );
            if ChaCha8Rng::seed_from_u64(h).gen_bool(self.flip_probability) {
                verified = !verified;
            }
        }
        (verified, overlap.min(u64::from(u32::MAX)) as u32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Skipped,
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeEvent {
    pub query: usize,
    pub db: usize,
    pub rank: usize,
    pub verdict: Verdict,
}

/// Raw counts of one repetition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub max_cc_size: usize,
    pub final_cc: usize,
    /// Index of the last processed edge, `None` if nothing was processed.
    pub idx_last: Option<usize>,
    pub skipped: usize,
    pub success: usize,
    pub failure: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Repetition {
    pub edges: Vec<EdgeEvent>,
    /// Component count after each processed edge.
    pub cc_trace: Vec<usize>,
    pub counts: RunCounts,
}

/// Percentages averaged over repetitions. Sizes are relative to the image
/// count, `idx_last` to the available edge count and verdicts to the
/// processed edge count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub max_cc_size: f64,
    pub cc: f64,
    pub idx_last: f64,
    pub skipped: f64,
    pub success: f64,
    pub failure: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub normalized_pairs_processed: f64,
    pub normalized_cc: f64,
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphConfig {
    pub shuffles: usize,
    pub terminate_on_single_cc: bool,
    pub seed: u64,
    /// Points of the averaged trace on the normalized axis.
    pub trace_points: usize,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        Self {
            shuffles: 1000,
            terminate_on_single_cc: false,
            seed: 0,
            trace_points: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraphRun {
    pub n_images: usize,
    pub total_edges: usize,
    pub repetitions: Vec<Repetition>,
    pub trace: Vec<TracePoint>,
    pub stats: RunStats,
}

/// Query visiting order for repetition `rep`.
pub fn query_order(n_queries: usize, seed: u64, rep: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    let mut order: Vec<usize> = (0..n_queries).collect();
    order.shuffle(&mut rng);
    order
}

/// Retrieval lists resolved to image ordinals.
struct Resolved {
    queries: Vec<usize>,
    ranked: Vec<Vec<usize>>,
}

fn resolve(images: &[String], retrievals: &[(String, Vec<String>)]) -> Result<Resolved> {
    let index: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(k, id)| (id.as_str(), k))
        .collect();
    if index.len() != images.len() {
        return Err(VopError::Validation("duplicate image id in pose graph".into()));
    }
    let get = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| VopError::UnknownImage(id.to_string()))
    };
    let mut queries = Vec::with_capacity(retrievals.len());
    let mut ranked = Vec::with_capacity(retrievals.len());
    for (q, list) in retrievals {
        queries.push(get(q)?);
        ranked.push(list.iter().map(|d| get(d)).collect::<Result<Vec<_>>>()?);
    }
    Ok(Resolved { queries, ranked })
}

fn run_once(
    n_images: usize,
    images: &[String],
    r: &Resolved,
    verifier: &dyn EdgeVerifier,
    order: &[usize],
    terminate_on_single_cc: bool,
) -> Repetition {
    let mut uf = UnionFind::new(n_images);
    let mut edges = Vec::new();
    let mut cc_trace = Vec::new();
    let mut counts = RunCounts::default();
    let max_rank = r.ranked.iter().map(Vec::len).max().unwrap_or(0);
    'rounds: for rank in 0..max_rank {
        for &k in order {
            if terminate_on_single_cc && uf.component_count() <= 1 {
                break 'rounds;
            }
            let Some(&db) = r.ranked[k].get(rank) else {
                continue;
            };
            let query = r.queries[k];
            let verdict = if uf.connected(query, db) {
                counts.skipped += 1;
                Verdict::Skipped
            } else if verifier.verify(&images[query], &images[db]).0 {
                uf.union(query, db);
                counts.success += 1;
                Verdict::Success
            } else {
                counts.failure += 1;
                Verdict::Failure
            };
            edges.push(EdgeEvent { query, db, rank, verdict });
            cc_trace.push(uf.component_count());
        }
    }
    counts.max_cc_size = uf.max_component_size();
    counts.final_cc = uf.component_count();
    counts.idx_last = edges.len().checked_sub(1);
    Repetition {
        edges,
        cc_trace,
        counts,
    }
}

/// Component count after `t` processed edges, linearly interpolated, held
/// constant after the run ends.
fn trace_at(n_images: usize, trace: &[usize], t: f64) -> f64 {
    let value = |s: usize| -> f64 {
        if s == 0 {
            n_images as f64
        } else {
            trace.get(s - 1).or(trace.last()).copied().unwrap_or(n_images) as f64
        }
    };
    let lo = t.floor() as usize;
    let frac = t - lo as f64;
    if frac == 0.0 {
        value(lo)
    } else {
        value(lo) * (1.0 - frac) + value(lo + 1) * frac
    }
}

/// Runs `cfg.shuffles` repetitions, each with its own query order, and
/// averages their traces on a normalized axis.
pub fn run_pose_graph(
    images: &[String],
    retrievals: &[(String, Vec<String>)],
    verifier: &dyn EdgeVerifier,
    cfg: &PoseGraphConfig,
) -> Result<PoseGraphRun> {
    if retrievals.is_empty() || retrievals.iter().all(|(_, l)| l.is_empty()) {
        return Err(VopError::Validation("pose graph needs non-empty retrieval lists".into()));
    }
    if cfg.shuffles == 0 || cfg.trace_points < 2 {
        return Err(VopError::Validation("need at least one shuffle and two trace points".into()));
    }
    let r = resolve(images, retrievals)?;
    let n = images.len();
    let total_edges: usize = r.ranked.iter().map(Vec::len).sum();
    let repetitions: Vec<Repetition> = (0..cfg.shuffles as u64)
        .into_par_iter()
        .map(|rep| {
            let order = query_order(r.queries.len(), cfg.seed, rep);
            run_once(n, images, &r, verifier, &order, cfg.terminate_on_single_cc)
        })
        .collect();

    let reps = repetitions.len() as f64;
    let trace = (0..cfg.trace_points)
        .map(|k| {
            let x = k as f64 / (cfg.trace_points - 1) as f64;
            let vals: Vec<f64> = repetitions
                .iter()
                .map(|rep| trace_at(n, &rep.cc_trace, x * total_edges as f64) / n as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / reps;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps;
            TracePoint {
                normalized_pairs_processed: x,
                normalized_cc: mean,
                std: var.sqrt(),
            }
        })
        .collect();

    let pct = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
    let mut stats = RunStats::default();
    for rep in &repetitions {
        let c = &rep.counts;
        let processed = rep.edges.len() as f64;
        stats.max_cc_size += pct(c.max_cc_size as f64, n as f64);
        stats.cc += pct(c.final_cc as f64, n as f64);
        stats.idx_last += pct(c.idx_last.map_or(0.0, |i| (i + 1) as f64), total_edges as f64);
        stats.skipped += pct(c.skipped as f64, processed);
        stats.success += pct(c.success as f64, processed);
        stats.failure += pct(c.failure as f64, processed);
    }
    for v in [
        &mut stats.max_cc_size,
        &mut stats.cc,
        &mut stats.idx_last,
        &mut stats.skipped,
        &mut stats.success,
        &mut stats.failure,
    ] {
        *v /= reps;
    }
    Ok(PoseGraphRun {
        n_images: n,
        total_edges,
        repetitions,
        trace,
        stats,
    })
}

/// Writes the averaged trace as CSV.
pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    atomic_write(path, |file| {
        let mut w = csv::Writer::from_writer(file);
        for p in trace {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| VopError::io(path, e))?;
        Ok(())
    })
}

pub fn write_stats_json(path: &Path, stats: &RunStats) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(stats)?;
    bytes.push(b'\n');
    atomic_write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("im{k}")).collect()
    }

    fn cfg(shuffles: usize) -> PoseGraphConfig {
        PoseGraphConfig {
            shuffles,
            ..Default::default()
        }
    }

    #[test]
    fn union_find_basics() {
        let mut uf = UnionFind::new(5);
        assert!(uf.union(0, 1));
        assert!(uf.union(3, 4));
        assert!(!uf.union(1, 0));
        assert_eq!(uf.component_count(), 3);
        assert!(uf.union(1, 4));
        assert_eq!(uf.component_size(3), 4);
        assert_eq!(uf.max_component_size(), 4);
        assert!(!uf.connected(2, 0));
    }

    #[test]
    fn always_false_keeps_all_components() {
        let im = ids(6);
        let retr: Vec<_> = (0..6).map(|k| (im[k].clone(), vec![im[(k + 1) % 6].clone()])).collect();
        let never = |_: &str, _: &str| (false, 0);
        let run = run_pose_graph(&im, &retr, &never, &cfg(4)).unwrap();
        for rep in &run.repetitions {
            assert!(rep.cc_trace.iter().all(|c| *c == 6));
            assert_eq!(rep.counts.failure, 6);
        }
        assert!(run.trace.iter().all(|p| p.normalized_cc == 1.0 && p.std == 0.0));
    }

    #[test]
    fn chain_with_always_true_is_spanning() {
        let n = 10;
        let im = ids(n);
        let retr: Vec<_> = (0..n - 1).map(|k| (im[k].clone(), vec![im[k + 1].clone()])).collect();
        let always = |_: &str, _: &str| (true, 100);
        let run = run_pose_graph(&im, &retr, &always, &cfg(8)).unwrap();
        for rep in &run.repetitions {
            assert_eq!(rep.counts.final_cc, 1);
            assert_eq!(rep.counts.success, n - 1);
            assert_eq!(rep.counts.failure, 0);
        }
        assert_eq!(run.stats.success, 100.0);
        assert!((run.trace.last().unwrap().normalized_cc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn termination_stops_at_single_component() {
        let im = ids(3);
        let retr = vec![
            (im[0].clone(), vec![im[1].clone(), im[2].clone()]),
            (im[1].clone(), vec![im[2].clone(), im[0].clone()]),
            (im[2].clone(), vec![im[0].clone(), im[1].clone()]),
        ];
        let always = |_: &str, _: &str| (true, 1);
        let c = PoseGraphConfig { terminate_on_single_cc: true, ..cfg(5) };
        let run = run_pose_graph(&im, &retr, &always, &c).unwrap();
        for rep in &run.repetitions {
            assert_eq!(*rep.cc_trace.last().unwrap(), 1);
            assert_eq!(rep.cc_trace.iter().filter(|c| **c == 1).count(), 1);
        }
    }

    #[test]
    fn unknown_id_is_an_error() {
        let im = ids(2);
        let retr = vec![(im[0].clone(), vec!["nope".to_string()])];
        let always = |_: &str, _: &str| (true, 1);
        assert!(matches!(
            run_pose_graph(&im, &retr, &always, &cfg(1)),
            Err(VopError::UnknownImage(_))
        ));
    }

    #[test]
    fn overlap_verifier_threshold_and_noise() {
        let v = OverlapVerifier::new([("a".into(), "b".into(), 12)], 10, 0.0, 1).unwrap();
        assert_eq!(v.verify("a", "b"), (true, 12));
        assert_eq!(v.verify("b", "a"), (true, 12));
        assert_eq!(v.verify("a", "c"), (false, 0));
        let flip = OverlapVerifier::new([("a".into(), "b".into(), 12)], 10, 1.0, 1).unwrap();
        assert_eq!(flip.verify("a", "b"), (false, 12));
        let half = OverlapVerifier::new(Vec::new(), 1, 0.5, 9).unwrap();
        let ones = (0..400)
            .filter(|k| half.verify(&format!("q{k}"), "d").0)
            .count();
        assert!((150..250).contains(&ones));
        assert_eq!(half.verify("q1", "d"), half.verify("q1", "d"));
    }

    #[test]
    fn trace_interpolation() {
        assert_eq!(trace_at(4, &[3, 2], 0.0), 4.0);
        assert_eq!(trace_at(4, &[3, 2], 0.5), 3.5);
        assert_eq!(trace_at(4, &[3, 2], 2.0), 2.0);
        assert_eq!(trace_at(4, &[3, 2], 5.0), 2.0);
    }
}
