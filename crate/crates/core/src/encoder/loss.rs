use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VopError};

/// Loss margin and batch composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Target similarity for matched patch pairs.
    pub margin: f64,
    /// Share of each batch made of image pairs from distinct scenes.
    pub negative_fraction: f64,
    /// Positive image pairs are drawn only from this overlap-fraction range.
    pub overlap_min: f64,
    pub overlap_max: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            negative_fraction: 0.5,
            overlap_min: 0.10,
            overlap_max: 0.70,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(VopError::Validation(format!("margin {} not in (0, 1]", self.margin)));
        }
        for (name, v) in [
            ("negative_fraction", self.negative_fraction),
            ("overlap_min", self.overlap_min),
            ("overlap_max", self.overlap_max),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(VopError::Validation(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if self.overlap_min > self.overlap_max {
            return Err(VopError::Validation("overlap_min exceeds overlap_max".into()));
        }
        Ok(())
    }
}

/// Contrastive loss between query and database patch embeddings.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_query: Array2<f64>,
    pub grad_db: Array2<f64>,
}

/// Mean over all `n_q × n_db` patch pairs of
/// `l·(σ − δ)² + (1 − l)·δ²`, where `δ` is the inner product of the (unit)
/// embeddings and `l` the ground-truth label (row-major `labels`).
pub fn contrastive_loss(
    emb_q: &Array2<f64>,
    emb_db: &Array2<f64>,
    labels: &[bool],
    margin: f64,
) -> Result<LossOutput> {
    let (nq, nd) = (emb_q.nrows(), emb_db.nrows());
    if nq == 0 || nd == 0 {
        return Err(VopError::Validation("contrastive loss on an empty batch".into()));
    }
    if emb_q.ncols() != emb_db.ncols() {
        return Err(VopError::DimensionMismatch {
            context: "embedding widths",
            expected: emb_q.ncols(),
            actual: emb_db.ncols(),
        });
    }
    if labels.len() != nq * nd {
        return Err(VopError::DimensionMismatch {
            context: "label matrix size",
            expected: nq * nd,
            actual: labels.len(),
        });
    }
    let sims = emb_q.dot(&emb_db.t());
    let labels = ndarray::ArrayView2::from_shape((nq, nd), labels).expect("length checked");
    let inv = 1.0 / (nq * nd) as f64;
    let mut loss = 0.0;
    let mut grad_sims = Array2::zeros((nq, nd));
    Zip::from(&mut grad_sims)
        .and(&sims)
        .and(labels)
        .for_each(|g, s, l| {
            if *l {
                let r = margin - s;
                loss += r * r;
                *g = -2.0 * r * inv;
            } else {
                loss += s * s;
                *g = 2.0 * s * inv;
            }
        });
    Ok(LossOutput {
        loss: loss * inv,
        grad_query: grad_sims.dot(emb_db),
        grad_db: grad_sims.t().dot(emb_q),
    })
}

/// Mean similarity over positive and over negative patch pairs.
pub fn similarity_by_label(
    emb_q: &Array2<f64>,
    emb_db: &Array2<f64>,
    labels: &[bool],
) -> (Option<f64>, Option<f64>) {
    let sims = emb_q.dot(&emb_db.t());
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for (s, l) in sims.iter().zip(labels) {
        if *l {
            pos += s;
            n_pos += 1;
        } else {
            neg += s;
            n_neg += 1;
        }
    }
    (
        (n_pos > 0).then(|| pos / n_pos as f64),
        (n_neg > 0).then(|| neg / n_neg as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m: Array2<f64> = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
        for mut r in m.outer_iter_mut() {
            let norm: f64 = r.dot(&r).sqrt();
            r /= norm;
        }
        m
    }

    #[test]
    fn all_positive_at_margin_is_zero() {
        let e = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let out = contrastive_loss(&e, &e, &[true; 4], 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_query.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn all_negative_orthogonal_is_zero() {
        let q = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let d = ndarray::array![[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]];
        let out = contrastive_loss(&q, &d, &[false; 4], 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn negative_term_is_added() {
        let e = ndarray::array![[1.0, 0.0]];
        let out = contrastive_loss(&e, &e, &[false], 1.0).unwrap();
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let e = Array2::<f64>::zeros((0, 3));
        assert!(contrastive_loss(&e, &e, &[], 1.0).is_err());
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(contrastive_loss(&a, &b, &[false; 4], 1.0).is_err());
        assert!(contrastive_loss(&a, &a, &[false; 3], 1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let (nq, nd, d) = (5, 6, 4);
            let q = unit_rows(&mut rng, nq, d);
            let db = unit_rows(&mut rng, nd, d);
            let labels: Vec<bool> = (0..nq * nd).map(|_| rng.gen_bool(0.3)).collect();
            let out = contrastive_loss(&q, &db, &labels, 0.9).unwrap();
            let h = 1e-5;
            for (which, base, grad) in [(0, &q, &out.grad_query), (1, &db, &out.grad_db)] {
                for idx in 0..base.len() {
                    let (r, c) = (idx / d, idx % d);
                    let eval = |delta: f64| {
                        let mut m = base.clone();
                        m[(r, c)] += delta;
                        let (a, b) = if which == 0 { (&m, &db) } else { (&q, &m) };
                        contrastive_loss(a, b, &labels, 0.9).unwrap().loss
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = grad[(r, c)];
                    let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "rel err {rel}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = unit_rows(&mut rng, 4, 3);
            let db = unit_rows(&mut rng, 4, 3);
            let labels: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
            assert!(contrastive_loss(&q, &db, &labels, 1.0).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { overlap_min: 0.8, ..Default::default() }.validate().is_err());
        assert!(LossConfig { negative_fraction: -0.1, ..Default::default() }.validate().is_err());
    }
}
