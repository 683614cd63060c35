//! File-to-file pipeline stages behind the command-line front end. Every
//! output is written atomically; diagnostics go to stderr as JSON lines.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::encoder::{train, write_loss_log, EpochLog, TrainConfig, TrainState, TrainingDataset};
use crate::error::{Result, VopError};
use crate::eval::{evaluate_retrievals, write_recall_csv, GtPositives, RetrievalMetrics};
use crate::geometry::{build_supervision_depth, image_overlap, overlap_from_points, GtMatchSet, SupervisionConfig};
use crate::index::{
    build_index, calibrate_radius, load_index, pool_patches, retrieve_topk, save_index, PatchIndex,
    RetrievalOptions, VoteMode, Weighting, DEFAULT_SHORTLIST,
};
use crate::io::{
    read_checkpoint, read_features, read_jsonl, write_checkpoint, write_features, write_jsonl, IndexSidecar,
    Manifest, OverlapRecord, RankedEntry, RetrievalRecord, SupervisionRecord,
};
use crate::posegraph::{run_pose_graph, write_stats_json, write_trace_csv, OverlapVerifier, PoseGraphConfig, RunStats};
use crate::types::{DepthMap, ImageEmbeddings};

/// Emits one diagnostic JSON line on stderr.
pub fn diag(event: &str, fields: Value) {
    let mut obj = Map::new();
    obj.insert("event".into(), Value::String(event.into()));
    if let Value::Object(f) = fields {
        obj.extend(f);
    }
    eprintln!("{}", Value::Object(obj));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperviseSettings {
    pub stride: u32,
    pub pixel_tol: f64,
    pub depth_tol: f64,
    /// Negative patch pairs sampled per image pair.
    pub negatives_per_pair: usize,
}

impl Default for SuperviseSettings {
    fn default() -> Self {
        let c = SupervisionConfig::default();
        Self {
            stride: c.stride,
            pixel_tol: c.pixel_tol,
            depth_tol: c.depth_tol,
            negatives_per_pair: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub top_k: usize,
    pub mode: VoteMode,
    pub weights: Weighting,
    pub prefilter: bool,
    pub shortlist: usize,
    pub pool_factor: usize,
    /// Fixed radius threshold; calibrated from random patch pairs when absent.
    pub epsilon: Option<f64>,
    pub calibration_samples: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            top_k: 10,
            mode: VoteMode::Hard,
            weights: Weighting::Tfidf,
            prefilter: true,
            shortlist: DEFAULT_SHORTLIST,
            pool_factor: 1,
            epsilon: None,
            calibration_samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    /// Minimum ground-truth image overlap for a positive.
    pub overlap_threshold: u64,
    pub exclude_self: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            overlap_threshold: 1,
            exclude_self: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseGraphSettings {
    pub shuffles: usize,
    pub terminate_on_single_cc: bool,
    pub overlap_threshold: u64,
    pub flip_probability: f64,
    pub trace_points: usize,
    /// Drop a query's own image from its retrieval list.
    pub exclude_self: bool,
}

impl Default for PoseGraphSettings {
    fn default() -> Self {
        Self {
            shuffles: 1000,
            terminate_on_single_cc: false,
            overlap_threshold: 1,
            flip_probability: 0.0,
            trace_points: 101,
            exclude_self: true,
        }
    }
}

/// The single JSON configuration shared by all commands. `seed` is
/// mandatory; `train` holds [`TrainConfig`] fields other than the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VopConfig {
    pub seed: u64,
    #[serde(default)]
    pub supervise: SuperviseSettings,
    #[serde(default)]
    pub train: Map<String, Value>,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub posegraph: PoseGraphSettings,
}

impl VopConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            supervise: Default::default(),
            train: Map::new(),
            retrieval: Default::default(),
            eval: Default::default(),
            posegraph: Default::default(),
        }
    }

    /// Reads the config file when given; a `seed` flag overrides the file.
    /// Without a file the seed flag is required.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| VopError::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => Self::with_seed(seed.ok_or_else(|| {
                VopError::Validation("a seed is required: pass --seed or a config file with \"seed\"".into())
            })?),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut m = self.train.clone();
        m.insert("seed".into(), json!(self.seed));
        let cfg: TrainConfig = serde_json::from_value(Value::Object(m))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuperviseSummary {
    pub pairs: usize,
    pub positives: usize,
    pub overlaps: Option<usize>,
}

/// Depth-based supervision for every manifest pair, plus ground-truth image
/// overlaps when the manifest lists 3D points.
pub fn cmd_supervise(
    manifest_path: &Path,
    out: &Path,
    overlaps_out: Option<&Path>,
    settings: &SuperviseSettings,
    seed: u64,
) -> Result<SuperviseSummary> {
    let manifest = Manifest::load(manifest_path)?;
    let grid = manifest.grid()?;
    let cfg = SupervisionConfig {
        stride: settings.stride,
        pixel_tol: settings.pixel_tol,
        depth_tol: settings.depth_tol,
    };
    let pairs = manifest.supervision_pairs();
    let mut needed: Vec<&str> = pairs.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    needed.sort_unstable();
    needed.dedup();
    let depths: HashMap<&str, DepthMap> = needed
        .par_iter()
        .map(|id| Ok((*id, manifest.depth(id)?)))
        .collect::<Result<_>>()?;
    let cameras: HashMap<&str, _> = needed
        .iter()
        .map(|id| Ok((*id, manifest.camera(id)?)))
        .collect::<Result<_>>()?;
    let records: Vec<SupervisionRecord> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let (a, b) = (a.as_str(), b.as_str());
            let mut set =
                build_supervision_depth(a, b, &depths[a], &depths[b], &cameras[a], &cameras[b], &grid, &cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            set.sample_negatives(settings.negatives_per_pair, &mut rng);
            Ok(set.to_record())
        })
        .collect::<Result<_>>()?;
    write_jsonl(&records, out)?;
    let positives = records.iter().map(|r| r.pos.len()).sum();

    let mut n_overlaps = None;
    if let Some(points) = manifest.load_points()? {
        let path = overlaps_out.map_or_else(|| default_overlaps_path(out), Path::to_path_buf);
        let overlaps: Vec<OverlapRecord> = pairs
            .par_iter()
            .map(|(a, b)| {
                let m = overlap_from_points(&points, &cameras[a.as_str()], &cameras[b.as_str()], &grid);
                OverlapRecord {
                    i: a.clone(),
                    j: b.clone(),
                    overlap: image_overlap(&m).0,
                }
            })
            .collect();
        write_jsonl(&overlaps, &path)?;
        n_overlaps = Some(overlaps.len());
    }
    let summary = SuperviseSummary {
        pairs: records.len(),
        positives,
        overlaps: n_overlaps,
    };
    diag("supervise", serde_json::to_value(&summary)?);
    Ok(summary)
}

/// `x.jsonl` → `x.overlaps.jsonl`
pub fn default_overlaps_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.overlaps.jsonl"))
}

/// `x.vopf` → `x.json`
pub fn sidecar_path(index: &Path) -> PathBuf {
    index.with_extension("json")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub images: usize,
    pub pairs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn read_all_features(paths: &[PathBuf]) -> Result<Vec<crate::types::ImageFeatures>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_features(p)?);
    }
    Ok(out)
}

/// Trains the head on the supervised pairs and writes the checkpoint with the
/// lowest validation loss.
pub fn cmd_train(
    features: &[PathBuf],
    supervision: &[PathBuf],
    cfg: &TrainConfig,
    out_checkpoint: &Path,
    loss_log: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let feats = read_all_features(features)?;
    let n_patches = feats
        .first()
        .map(|f| f.n_patches())
        .ok_or_else(|| VopError::Validation("no training features".into()))?;
    let mut sets = Vec::new();
    for p in supervision {
        for rec in read_jsonl::<SupervisionRecord>(p)? {
            sets.push(GtMatchSet::from_record(&rec, n_patches)?);
        }
    }
    let ds = TrainingDataset::new(feats, &sets)?;
    let (train_ds, mut val_ds) = ds.split_scenes(cfg.val_fraction, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let need = |d: &TrainingDataset| d.scene_count() >= 2 && d.eligible_positive_count(&cfg.loss) > 0;
    let train_ds = if need(&train_ds) && need(&val_ds) {
        train_ds
    } else {
        diag(
            "validation_fallback",
            json!({"reason": "too few scenes to hold out a validation split", "scenes": ds.scene_count()}),
        );
        val_ds = ds.clone();
        ds.clone()
    };
    let state = TrainState::new(cfg)?;
    let outcome = train(state, &train_ds, &val_ds, cfg)?;
    for l in &outcome.log {
        diag("epoch", serde_json::to_value(l)?);
    }
    write_checkpoint(&outcome.best.head, out_checkpoint)?;
    let log_path = loss_log.map_or_else(|| out_checkpoint.with_extension("loss.csv"), Path::to_path_buf);
    write_loss_log(&log_path, &outcome.log)?;
    Ok(TrainSummary {
        images: ds.image_count(),
        pairs: sets.len(),
        train_scenes: train_ds.scene_count(),
        val_scenes: val_ds.scene_count(),
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

/// Embeds every image with dropout off. The global embedding is the
/// re-normalized mean of the patch embeddings.
pub fn cmd_embed(checkpoint: &Path, features: &Path, out: &Path) -> Result<usize> {
    let head = read_checkpoint(checkpoint)?;
    let feats = read_features(features)?;
    let embs: Vec<_> = feats
        .par_iter()
        .map(|f| {
            let e = head.embed(f.patch_feats.mapv(f64::from).view())?;
            Ok(ImageEmbeddings::from_raw(f.image_id.clone(), f.grid, &e.rows, None)?
                .with_mean_cls()
                .into_features())
        })
        .collect::<Result<_>>()?;
    write_features(&embs, out)?;
    diag("embed", json!({"images": embs.len(), "dim": head.output_dim()}));
    Ok(embs.len())
}

fn read_embeddings(path: &Path) -> Result<Vec<ImageEmbeddings>> {
    read_features(path)?.iter().map(ImageEmbeddings::from_features).collect()
}

fn pool_all(embs: Vec<ImageEmbeddings>, factor: usize) -> Result<Vec<ImageEmbeddings>> {
    if factor == 1 {
        return Ok(embs);
    }
    embs.iter().map(|e| pool_patches(e, factor)).collect()
}

/// Builds the index over `embeddings` (pooled by `settings.pool_factor`),
/// calibrates the radius on database patch pairs and writes the index
/// embeddings plus sidecar.
pub fn cmd_index(embeddings: &Path, out: &Path, settings: &RetrievalSettings, seed: u64) -> Result<IndexSidecar> {
    let db = pool_all(read_embeddings(embeddings)?, settings.pool_factor)?;
    let index = build_index(&db)?;
    let grid = index
        .grid()
        .ok_or_else(|| VopError::Validation("cannot index an empty database".into()))?;
    let epsilon = match settings.epsilon {
        Some(e) => e,
        None => {
            calibrate_radius(&db, &db, settings.calibration_samples, &mut ChaCha8Rng::seed_from_u64(seed))?.epsilon
        }
    };
    let sidecar = IndexSidecar {
        n_images: index.len(),
        image_side: grid.image_side(),
        patch_side: grid.patch_side(),
        epsilon,
        calibration_seed: seed,
        doc_freq: Some(index.document_frequencies(epsilon)),
    };
    save_index(&index, &sidecar, out, &sidecar_path(out))?;
    diag("index", json!({"images": index.len(), "entries": index.entry_count(), "epsilon": epsilon}));
    Ok(sidecar)
}

/// Loads an index, pooling both it and the queries by `extra_pool` on top of
/// any pooling applied at build time.
fn prepare_query(
    index_path: &Path,
    queries: &Path,
    extra_pool: usize,
) -> Result<(PatchIndex, IndexSidecar, Vec<ImageEmbeddings>)> {
    let (mut index, sidecar) = load_index(index_path, &sidecar_path(index_path))?;
    let mut qs = read_embeddings(queries)?;
    if let (Some(ig), Some(q)) = (index.grid(), qs.first()) {
        let qg = q.grid();
        if qg.image_side() != ig.image_side() || ig.patch_side() % qg.patch_side() != 0 {
            return Err(VopError::Validation(format!(
                "query grid {}/{} does not match index grid {}/{}",
                qg.image_side(),
                qg.patch_side(),
                ig.image_side(),
                ig.patch_side()
            )));
        }
        qs = pool_all(qs, (ig.patch_side() / qg.patch_side()) as usize)?;
    }
    if extra_pool != 1 {
        let db = pool_all(index.to_embeddings()?, extra_pool)?;
        index = build_index(&db)?;
        qs = pool_all(qs, extra_pool)?;
    }
    Ok((index, sidecar, qs))
}

/// Retrieves the top-k database images for every query. The radius
/// threshold is `settings.epsilon` when set, otherwise calibrated on random
/// query / database patch pairs.
pub fn cmd_query(
    index_path: &Path,
    queries: &Path,
    out: &Path,
    settings: &RetrievalSettings,
    seed: u64,
) -> Result<Vec<RetrievalRecord>> {
    let (index, _sidecar, qs) = prepare_query(index_path, queries, settings.pool_factor)?;
    if settings.top_k == 0 || qs.is_empty() {
        write_jsonl::<RetrievalRecord>(&[], out)?;
        diag("query", json!({"queries": qs.len(), "top_k": settings.top_k}));
        return Ok(Vec::new());
    }
    let db = index.to_embeddings()?;
    let epsilon = match settings.epsilon {
        Some(e) => e,
        None => {
            calibrate_radius(&qs, &db, settings.calibration_samples, &mut ChaCha8Rng::seed_from_u64(seed))?.epsilon
        }
    };
    let opts = RetrievalOptions {
        epsilon,
        mode: settings.mode,
        weighting: settings.weights,
        prefilter: settings.prefilter,
        shortlist: settings.shortlist,
    };
    let records: Vec<RetrievalRecord> = qs
        .par_iter()
        .map(|q| {
            let ranked = retrieve_topk(q, &index, settings.top_k, &opts)?;
            Ok(RetrievalRecord {
                query: q.image_id().to_string(),
                ranked: ranked
                    .into_iter()
                    .map(|s| RankedEntry {
                        db: s.db_id,
                        score: s.score,
                        matches: s.matches,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(&records, out)?;
    diag("query", json!({"queries": records.len(), "top_k": settings.top_k, "epsilon": epsilon}));
    Ok(records)
}

/// Recall@k against overlap ground truth, written as JSON and optionally as
/// a `k,recall` CSV.
pub fn cmd_eval(
    retrievals: &Path,
    overlaps: &Path,
    supervision: Option<&Path>,
    settings: &EvalSettings,
    out_json: &Path,
    out_csv: Option<&Path>,
) -> Result<RetrievalMetrics> {
    let retr: Vec<RetrievalRecord> = read_jsonl(retrievals)?;
    let gt = GtPositives::from_overlaps(&read_jsonl::<OverlapRecord>(overlaps)?, settings.overlap_threshold);
    let sup = supervision.map(read_jsonl::<SupervisionRecord>).transpose()?;
    let metrics = evaluate_retrievals(&retr, &gt, sup.as_deref(), &settings.ks, settings.exclude_self)?;
    let mut bytes = serde_json::to_vec_pretty(&metrics)?;
    bytes.push(b'\n');
    crate::io::atomic_write_bytes(out_json, &bytes)?;
    if let Some(p) = out_csv {
        write_recall_csv(p, &metrics)?;
    }
    diag("eval", json!({"queries": metrics.n_queries, "recall_at_k": metrics.recall_at_k}));
    Ok(metrics)
}

/// Pose-graph construction from retrieval lists with the ground-truth
/// overlap verifier.
pub fn cmd_posegraph(
    retrievals: &Path,
    overlaps: &Path,
    settings: &PoseGraphSettings,
    seed: u64,
    out_trace: &Path,
    out_stats: &Path,
) -> Result<RunStats> {
    let retr: Vec<RetrievalRecord> = read_jsonl(retrievals)?;
    let mut images = Vec::new();
    let mut seen = HashSet::new();
    for r in &retr {
        for id in std::iter::once(&r.query).chain(r.ranked.iter().map(|e| &e.db)) {
            if seen.insert(id.clone()) {
                images.push(id.clone());
            }
        }
    }
    let lists: Vec<(String, Vec<String>)> = retr
        .iter()
        .map(|r| {
            let list = r
                .ranked
                .iter()
                .filter(|e| !(settings.exclude_self && e.db == r.query))
                .map(|e| e.db.clone())
                .collect();
            (r.query.clone(), list)
        })
        .collect();
    let verifier = OverlapVerifier::new(
        read_jsonl::<OverlapRecord>(overlaps)?
            .into_iter()
            .map(|r| (r.i, r.j, r.overlap)),
        settings.overlap_threshold,
        settings.flip_probability,
        seed,
    )?;
    let cfg = PoseGraphConfig {
        shuffles: settings.shuffles,
        terminate_on_single_cc: settings.terminate_on_single_cc,
        seed,
        trace_points: settings.trace_points,
    };
    let run = run_pose_graph(&images, &lists, &verifier, &cfg)?;
    write_trace_csv(out_trace, &run.trace)?;
    write_stats_json(out_stats, &run.stats)?;
    diag("posegraph", json!({"images": run.n_images, "edges": run.total_edges, "stats": run.stats}));
    Ok(run.stats)
}
