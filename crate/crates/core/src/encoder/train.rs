use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{augment_features, Sample, TrainingDataset};
use super::head::{EncoderHead, Gradients, DEFAULT_DROPOUT, DEFAULT_LAYER_DIMS};
use super::loss::{contrastive_loss, LossConfig};
use crate::error::{Result, VopError};
use crate::io::atomic_write;

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_layer_dims() -> Vec<usize> {
    DEFAULT_LAYER_DIMS.to_vec()
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_val_samples() -> usize {
    64
}
fn default_augment() -> f64 {
    0.1
}

/// Training configuration. Every field but `seed` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_layer_dims")]
    pub layer_dims: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Share of scenes held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Size of the fixed validation sample set.
    #[serde(default = "default_val_samples")]
    pub val_samples: usize,
    #[serde(default = "default_augment")]
    pub augment_strength: f64,
    /// Batches per epoch; by default enough to visit every eligible positive
    /// pair about once given the negative share.
    #[serde(default)]
    pub batches_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.val_samples == 0 {
            return Err(VopError::Validation("batch_size and val_samples must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(VopError::Validation(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VopError::Validation(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(VopError::Validation(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength < 1.0) {
            return Err(VopError::Validation("augment_strength not in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with β = (0.9, 0.999) and ε = 1e-8.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    step: u64,
}

impl Adam {
    pub fn new(head: &EncoderHead) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Gradients::zeros_like(head),
            v: Gradients::zeros_like(head),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.m
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.v
    }

    pub fn update(&mut self, head: &mut EncoderHead, grads: &Gradients, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in head
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, g, m, v| apply(p, *g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, g, m, v| apply(p, *g, m, v));
        }
    }
}

/// Head plus optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub head: EncoderHead,
    pub optimizer: Adam,
    pub epoch: usize,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let head = EncoderHead::new(&cfg.layer_dims, cfg.dropout, &mut rng)?;
        Ok(Self::from_head(head, cfg.seed))
    }

    pub fn from_head(head: EncoderHead, seed: u64) -> Self {
        Self {
            optimizer: Adam::new(&head),
            head,
            epoch: 0,
            rng_seed: seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss and similarity statistics of a head on a fixed sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the epoch with the lowest validation loss.
    pub best: TrainState,
    pub best_epoch: usize,
    /// State after the last epoch.
    pub last: TrainState,
    pub log: Vec<EpochLog>,
}

fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rng.gen()
}

fn pair_inputs(
    ds: &TrainingDataset,
    sample: &Sample,
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let q = ds.features(sample.query).mapv(f64::from);
    let d = ds.features(sample.db).mapv(f64::from);
    let (q, d) = if strength > 0.0 {
        (augment_features(&q, rng, strength), augment_features(&d, rng, strength))
    } else {
        (q, d)
    };
    concatenate(Axis(0), &[q.view(), d.view()]).expect("equal widths")
}

struct SampleResult {
    loss: f64,
    grads: Option<Gradients>,
    pos: (f64, usize),
    neg: (f64, usize),
}

fn run_sample(
    head: &EncoderHead,
    ds: &TrainingDataset,
    sample: &Sample,
    cfg: &TrainConfig,
    seed: u64,
    training: bool,
) -> Result<SampleResult> {
    let n = ds.n_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strength = if training { cfg.augment_strength } else { 0.0 };
    let x = pair_inputs(ds, sample, strength, &mut rng);
    let (emb, cache) = head.forward_train(x.view(), training, &mut rng)?;
    let q = emb.rows.slice(s![..n, ..]).to_owned();
    let d = emb.rows.slice(s![n.., ..]).to_owned();
    let labels = sample.label_matrix(n);
    let out = contrastive_loss(&q, &d, &labels, cfg.loss.margin)?;
    let sims = q.dot(&d.t());
    let (mut pos, mut neg) = ((0.0, 0), (0.0, 0));
    for (s, l) in sims.iter().zip(&labels) {
        let acc = if *l { &mut pos } else { &mut neg };
        acc.0 += s;
        acc.1 += 1;
    }
    let grads = if training {
        let grad_out = concatenate(Axis(0), &[out.grad_query.view(), out.grad_db.view()])
            .expect("equal widths");
        Some(head.backward(&cache, &grad_out)?)
    } else {
        None
    };
    Ok(SampleResult {
        loss: out.loss,
        grads,
        pos,
        neg,
    })
}

/// Draws the fixed validation sample set.
pub fn validation_samples(ds: &TrainingDataset, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    ds.sample_batch(&cfg.loss, cfg.val_samples, &mut rng)
}

/// Mean loss and positive / negative similarity of `head` over `samples`,
/// with dropout and augmentation off.
pub fn evaluate(
    head: &EncoderHead,
    ds: &TrainingDataset,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(VopError::Validation("evaluation on an empty sample set".into()));
    }
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| run_sample(head, ds, s, cfg, 0, false))
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
    let (ps, pn) = results.iter().fold((0.0, 0), |a, r| (a.0 + r.pos.0, a.1 + r.pos.1));
    let (ns, nn) = results.iter().fold((0.0, 0), |a, r| (a.0 + r.neg.0, a.1 + r.neg.1));
    Ok(EvalStats {
        loss,
        mean_positive: if pn > 0 { ps / pn as f64 } else { f64::NAN },
        mean_negative: if nn > 0 { ns / nn as f64 } else { f64::NAN },
    })
}

/// One optimizer step on a batch; returns the mean batch loss.
pub fn train_step(
    state: &mut TrainState,
    ds: &TrainingDataset,
    batch: &[Sample],
    cfg: &TrainConfig,
    batch_seed: u64,
) -> Result<f64> {
    let head = &state.head;
    let results: Vec<SampleResult> = batch
        .par_iter()
        .enumerate()
        .map(|(k, s)| run_sample(head, ds, s, cfg, derive_seed(batch_seed, 3, k as u64), true))
        .collect::<Result<_>>()?;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
    if !loss.is_finite() {
        return Err(VopError::Numerical(format!("non-finite batch loss {loss}")));
    }
    let mut grads = Gradients::tree_sum(results.into_iter().filter_map(|r| r.grads).collect())
        .ok_or_else(|| VopError::Validation("empty batch".into()))?;
    grads.scale(1.0 / batch.len() as f64);
    state.optimizer.update(&mut state.head, &grads, cfg.lr);
    Ok(loss)
}

/// Trains for `cfg.epochs` epochs and keeps the checkpoint with the lowest
/// validation loss. Each epoch logs the mean training loss and the loss on a
/// fixed validation sample set.
pub fn train(
    mut state: TrainState,
    train_ds: &TrainingDataset,
    val_ds: &TrainingDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.head.input_dim() != train_ds.feature_dim() {
        return Err(VopError::DimensionMismatch {
            context: "head input width vs features",
            expected: state.head.input_dim(),
            actual: train_ds.feature_dim(),
        });
    }
    let val_samples = validation_samples(val_ds, cfg)?;
    let n_batches = cfg.batches_per_epoch.unwrap_or_else(|| {
        let positives = train_ds.eligible_positive_count(&cfg.loss);
        let per_batch = (cfg.batch_size as f64 * (1.0 - cfg.loss.negative_fraction)).max(1.0);
        ((positives as f64 / per_batch).ceil() as usize).max(1)
    });
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, TrainState)> = None;
    for _ in 0..cfg.epochs {
        let epoch = state.epoch + 1;
        let mut total = 0.0;
        for b in 0..n_batches {
            let batch_seed = derive_seed(state.rng_seed, 1, ((epoch as u64) << 32) | b as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let batch = train_ds.sample_batch(&cfg.loss, cfg.batch_size, &mut rng)?;
            total += train_step(&mut state, train_ds, &batch, cfg, batch_seed).map_err(|e| match e {
                VopError::Numerical(msg) => {
                    VopError::Numerical(format!("{msg} at epoch {epoch}, batch {b}"))
                }
                other => other,
            })?;
        }
        state.epoch = epoch;
        let val_loss = evaluate(&state.head, val_ds, &val_samples, cfg)?.loss;
        if !val_loss.is_finite() {
            return Err(VopError::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss: total / n_batches as f64,
            val_loss,
        });
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, state.clone()));
        }
    }
    let (best_state, best_epoch) = match best {
        Some((_, s)) => {
            let e = s.epoch;
            (s, e)
        }
        None => (state.clone(), state.epoch),
    };
    Ok(TrainOutcome {
        best: best_state,
        best_epoch,
        last: state,
        log,
    })
}

/// Writes the loss log as CSV with header `epoch,train_loss,val_loss`.
pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    atomic_write(path, |file| {
        let mut w = csv::Writer::from_writer(file);
        for row in log {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| VopError::io(path, e))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GtMatchSet;
    use crate::types::{ImageFeatures, PatchGrid};
    use rand_distr::{Distribution, Normal};

    /// Four scenes of two images on a 2×2 grid; matched patches share a
    /// latent vector.
    fn toy(dim: usize) -> TrainingDataset {
        let grid = PatchGrid::new(28, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut feats = Vec::new();
        let mut sets = Vec::new();
        for scene in 0..4 {
            let latent = Array2::from_shape_simple_fn((4, dim), || normal.sample(&mut rng) as f32);
            let mut other = latent.clone();
            // patch 3 of the second image is unrelated
            for v in other.row_mut(3) {
                *v = normal.sample(&mut rng) as f32;
            }
            let (a, b) = (format!("s{scene}a"), format!("s{scene}b"));
            feats.push(ImageFeatures::new(a.clone(), grid, latent, None).unwrap());
            feats.push(ImageFeatures::new(b.clone(), grid, other, None).unwrap());
            sets.push(GtMatchSet::new(a, b, 4, &[(0, 0), (1, 1)], &[]).unwrap());
        }
        TrainingDataset::new(feats, &sets).unwrap()
    }

    fn cfg(dim: usize) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e-3,
            layer_dims: vec![dim, 8, 8],
            val_samples: 8,
            batches_per_epoch: Some(4),
            ..TrainConfig::with_seed(5)
        }
    }

    #[test]
    fn config_requires_seed_and_fills_defaults() {
        assert!(serde_json::from_str::<TrainConfig>("{}").is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.lr), (30, 64, 1e-4));
        assert_eq!(c.layer_dims, vec![1024, 256, 256, 256]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = toy(6);
        let c = TrainConfig { lr: 0.0, ..cfg(6) };
        let state = TrainState::new(&c).unwrap();
        let before = state.head.clone();
        let out = train(state, &ds, &ds, &c).unwrap();
        assert_eq!(out.last.head, before);
        assert_eq!(out.best.head, before);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let ds = toy(6);
        let c = cfg(6);
        let a = train(TrainState::new(&c).unwrap(), &ds, &ds, &c).unwrap();
        let b = train(TrainState::new(&c).unwrap(), &ds, &ds, &c).unwrap();
        assert_eq!(a.best.head, b.best.head);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn best_checkpoint_has_minimum_validation_loss() {
        let ds = toy(6);
        let c = TrainConfig { epochs: 6, ..cfg(6) };
        let out = train(TrainState::new(&c).unwrap(), &ds, &ds, &c).unwrap();
        let min = out.log.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
        let best_log = out.log.iter().find(|l| l.epoch == out.best_epoch).unwrap();
        assert_eq!(best_log.val_loss, min);
        let samples = validation_samples(&ds, &c).unwrap();
        let again = evaluate(&out.best.head, &ds, &samples, &c).unwrap();
        assert_eq!(again.loss, min);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = EncoderHead::new(&[2, 2], 0.0, &mut rng).unwrap();
        let before = head.clone();
        let mut grads = Gradients::zeros_like(&head);
        grads.layers[0].weights.fill(3.0);
        let mut adam = Adam::new(&head);
        adam.update(&mut head, &grads, 0.01);
        for (a, b) in head.layers()[0].weights.iter().zip(before.layers()[0].weights.iter()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(head.layers()[0].bias, before.layers()[0].bias);
    }

    #[test]
    fn loss_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_loss_log(&path, &[EpochLog { epoch: 1, train_loss: 0.5, val_loss: 0.25 }]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_loss\n1,0.5,0.25\n");
    }
}
