use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};

use crate::error::{Result, VopError};
use crate::types::DEGENERATE_NORM;

/// Backbone feature width.
pub const BACKBONE_DIM: usize = 1024;
/// Output embedding width.
pub const EMBEDDING_DIM: usize = 256;
pub const DEFAULT_LAYER_DIMS: [usize; 4] = [BACKBONE_DIM, EMBEDDING_DIM, EMBEDDING_DIM, EMBEDDING_DIM];
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Exact GELU, `x Φ(x)` with the erf-based normal CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// One affine layer, `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Trainable MLP head: `linear → [GELU → dropout → linear]* → L2 normalize`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderHead {
    layers: Vec<Layer>,
    dropout_rate: f64,
}

/// Parameter gradients, shaped like the head's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(head: &EncoderHead) -> Self {
        Self {
            layers: head.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// Sums a list of gradients with a fixed pairwise tree so the result does
    /// not depend on how the list was produced.
    pub fn tree_sum(mut parts: Vec<Gradients>) -> Option<Gradients> {
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(mut a) = it.next() {
                if let Some(b) = it.next() {
                    a.add_assign(&b);
                }
                next.push(a);
            }
            parts = next;
        }
        parts.pop()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input of each linear layer (post-dropout activations after layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each hidden linear layer.
    pre_activations: Vec<Array2<f64>>,
    /// Per-layer dropout scale factors (0 or 1/(1-p)); `None` when inactive.
    masks: Vec<Option<Array2<f64>>>,
    /// Output before normalization.
    raw: Array2<f64>,
    norms: Vec<f64>,
}

/// Head output: unit rows, with degenerate (all-zero) rows flagged.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub rows: Array2<f64>,
    pub degenerate: Vec<bool>,
}

impl EncoderHead {
    /// Random initialization: weights uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn new<R: Rng>(layer_dims: &[usize], dropout_rate: f64, rng: &mut R) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(VopError::Validation(format!(
                "layer dims {layer_dims:?} need at least two positive entries"
            )));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || dist.sample(rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::from_layers(layers, dropout_rate)
    }

    pub fn from_layers(layers: Vec<Layer>, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(VopError::Validation("encoder head needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(VopError::Validation(format!("dropout rate {dropout_rate} not in [0, 1)")));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(VopError::DimensionMismatch {
                    context: "layer bias",
                    expected: l.weights.ncols(),
                    actual: l.bias.len(),
                });
            }
            if k > 0 && layers[k - 1].weights.ncols() != l.weights.nrows() {
                return Err(VopError::DimensionMismatch {
                    context: "consecutive layer widths",
                    expected: layers[k - 1].weights.ncols(),
                    actual: l.weights.nrows(),
                });
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(VopError::Validation(format!("non-finite parameter in layer {k}")));
            }
        }
        Ok(Self {
            layers,
            dropout_rate,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weights.nrows())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weights.ncols()).unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Inference forward pass (dropout off).
    pub fn embed(&self, feats: ArrayView2<'_, f64>) -> Result<Embedded> {
        let cache = self.forward_impl(feats, None::<&mut rand::rngs::mock::StepRng>)?;
        Ok(Self::finish(cache).0)
    }

    /// Forward pass; dropout is active only when `training` is set and then
    /// draws its masks from `rng`.
    pub fn forward<R: Rng>(
        &self,
        feats: ArrayView2<'_, f64>,
        training: bool,
        rng: &mut R,
    ) -> Result<Embedded> {
        let cache = self.forward_impl(feats, training.then_some(rng))?;
        Ok(Self::finish(cache).0)
    }

    /// Forward pass that also returns what `backward` needs.
    pub fn forward_train<R: Rng>(
        &self,
        feats: ArrayView2<'_, f64>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Embedded, ForwardCache)> {
        let cache = self.forward_impl(feats, training.then_some(rng))?;
        Ok(Self::finish(cache))
    }

    fn forward_impl<R: Rng>(
        &self,
        feats: ArrayView2<'_, f64>,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardCache> {
        if feats.ncols() != self.input_dim() {
            return Err(VopError::DimensionMismatch {
                context: "encoder input width",
                expected: self.input_dim(),
                actual: feats.ncols(),
            });
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(VopError::Validation("non-finite encoder input".into()));
        }
        let keep = Bernoulli::new(1.0 - self.dropout_rate).expect("rate validated");
        let scale = 1.0 / (1.0 - self.dropout_rate);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len() - 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        masks.push(None);
        let mut h = affine(feats, &self.layers[0]);
        inputs.push(feats.to_owned());
        for layer in &self.layers[1..] {
            let mut a = h.mapv(gelu);
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout_rate > 0.0 => {
                    let m = Array2::from_shape_simple_fn(a.raw_dim(), || {
                        if keep.sample(r) {
                            scale
                        } else {
                            0.0
                        }
                    });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            pre_activations.push(h);
            h = affine(a.view(), layer);
            inputs.push(a);
        }
        let norms = h
            .axis_iter(Axis(0))
            .map(|row| row.dot(&row).sqrt())
            .collect();
        Ok(ForwardCache {
            inputs,
            pre_activations,
            masks,
            raw: h,
            norms,
        })
    }

    fn finish(cache: ForwardCache) -> (Embedded, ForwardCache) {
        let mut rows = cache.raw.clone();
        let mut degenerate = Vec::with_capacity(rows.nrows());
        for (mut row, norm) in rows.axis_iter_mut(Axis(0)).zip(&cache.norms) {
            if *norm < DEGENERATE_NORM {
                row.fill(0.0);
                degenerate.push(true);
            } else {
                row /= *norm;
                degenerate.push(false);
            }
        }
        (Embedded { rows, degenerate }, cache)
    }

    /// Back-propagates the gradient of a scalar loss with respect to the
    /// normalized outputs down to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Result<Gradients> {
        if grad_out.dim() != cache.raw.dim() {
            return Err(VopError::DimensionMismatch {
                context: "output gradient rows",
                expected: cache.raw.nrows(),
                actual: grad_out.nrows(),
            });
        }
        // through row normalization: d/dy (y/|y|) applied to g is (g - e(e·g)) / |y|
        let mut grad = Array2::zeros(cache.raw.raw_dim());
        for ((mut dst, (raw, g)), norm) in grad
            .axis_iter_mut(Axis(0))
            .zip(cache.raw.axis_iter(Axis(0)).zip(grad_out.axis_iter(Axis(0))))
            .zip(&cache.norms)
        {
            if *norm < DEGENERATE_NORM {
                continue;
            }
            let e = &raw / *norm;
            let eg = e.dot(&g);
            Zip::from(&mut dst)
                .and(&e)
                .and(&g)
                .for_each(|d, e, g| *d = (g - e * eg) / norm);
        }
        let mut grads = Gradients::zeros_like(self);
        for k in (0..self.layers.len()).rev() {
            grads.layers[k].weights = cache.inputs[k].t().dot(&grad);
            grads.layers[k].bias = grad.sum_axis(Axis(0));
            if k == 0 {
                break;
            }
            let mut da = grad.dot(&self.layers[k].weights.t());
            if let Some(mask) = &cache.masks[k] {
                da *= mask;
            }
            Zip::from(&mut da)
                .and(&cache.pre_activations[k - 1])
                .for_each(|d, h| *d *= gelu_derivative(*h));
            grad = da;
        }
        Ok(grads)
    }
}

fn affine(x: ArrayView2<'_, f64>, layer: &Layer) -> Array2<f64> {
    let mut h = x.dot(&layer.weights);
    h += &layer.bias;
    h
}
