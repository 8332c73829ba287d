use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DropoutMask;
use crate::error::{Error, Result};

/// Sigmoid-weighted linear unit.
#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Positivity map for the variance head: `min(floor + softplus(raw), ceiling)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceBounds {
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for VarianceBounds {
    fn default() -> Self {
        Self {
            floor: 1e-6,
            ceiling: 1e2,
        }
    }
}

impl VarianceBounds {
    #[inline]
    pub fn map(&self, raw: f64) -> f64 {
        (self.floor + softplus(raw)).min(self.ceiling)
    }

    #[inline]
    pub fn map_grad(&self, raw: f64) -> f64 {
        if self.floor + softplus(raw) >= self.ceiling {
            0.0
        } else {
            sigmoid(raw)
        }
    }
}

/// Affine layer, `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Fan-in scaled normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let normal = Normal::new(0.0, 1.0 / (input as f64).sqrt()).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((input, output), |_| normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn sq_norm(&self) -> f64 {
        self.weight.iter().chain(self.bias.iter()).map(|v| v * v).sum()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Weights of a probabilistic MLP: a trunk of hidden layers with SiLU
/// activations followed by two heads, one for the mean and one for the raw
/// (pre-positivity) diagonal variance.
///
/// The same type doubles as the gradient container; every helper that walks
/// parameters visits trunk layers first, then the mean head, then the
/// variance head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub trunk: Vec<Dense>,
    pub mean_head: Dense,
    pub var_head: Dense,
    pub variance_bounds: VarianceBounds,
}

/// Intermediate values of a batched forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    scales: Vec<Array2<f64>>,
    raw_var: Array2<f64>,
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

impl MlpWeights {
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        variance_bounds: VarianceBounds,
    ) -> Result<Self> {
        Self::build(input_dim, hidden, output_dim, variance_bounds, |i, o| {
            Dense::random(rng, i, o)
        })
    }

    pub fn zeros(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        variance_bounds: VarianceBounds,
    ) -> Result<Self> {
        Self::build(input_dim, hidden, output_dim, variance_bounds, Dense::zeros)
    }

    fn build(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        variance_bounds: VarianceBounds,
        mut make: impl FnMut(usize, usize) -> Dense,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::config("network dimensions must be positive"));
        }
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &w in hidden {
            trunk.push(make(prev, w));
            prev = w;
        }
        Ok(Self {
            trunk,
            mean_head: make(prev, output_dim),
            var_head: make(prev, output_dim),
            variance_bounds,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mean_head.output_dim()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.trunk.iter().map(Dense::output_dim).collect()
    }

    /// Number of parameterised layers (trunk plus both heads).
    pub fn num_layers(&self) -> usize {
        self.trunk.len() + 2
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.mean_head))
            .chain(std::iter::once(&self.var_head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk
            .iter_mut()
            .chain(std::iter::once(&mut self.mean_head))
            .chain(std::iter::once(&mut self.var_head))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for layer in z.layers_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat view over every parameter in canonical order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Squared L2 norm (weights and biases) of each layer.
    pub fn layer_sq_norms(&self) -> Vec<f64> {
        self.layers().map(Dense::sq_norm).collect()
    }

    /// Checks shape consistency between consecutive layers and finiteness.
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim();
        for (i, layer) in self.trunk.iter().enumerate() {
            if layer.input_dim() != prev || layer.bias.len() != layer.output_dim() {
                return Err(Error::shape(format!("trunk layer {i} is inconsistent")));
            }
            prev = layer.output_dim();
        }
        for (name, head) in [("mean", &self.mean_head), ("variance", &self.var_head)] {
            if head.input_dim() != prev || head.bias.len() != head.output_dim() {
                return Err(Error::shape(format!("{name} head is inconsistent")));
            }
        }
        if self.var_head.output_dim() != self.mean_head.output_dim() {
            return Err(Error::shape("heads disagree on output dimension"));
        }
        if let Some(i) = self.layers().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("weights of layer {i}")));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &MlpWeights) -> bool {
        self.trunk.len() == other.trunk.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        if mask.widths() != self.hidden_widths() {
            return Err(Error::shape(format!(
                "mask widths {:?} do not match hidden widths {:?}",
                mask.widths(),
                self.hidden_widths()
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass returning `(mean, variance)`.
    pub fn forward(&self, input: &[f64], mask: &DropoutMask) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::shape(e.to_string()))?;
        let cache = self.forward_batch(x, std::slice::from_ref(mask))?;
        Ok((cache.mean.row(0).to_vec(), cache.var.row(0).to_vec()))
    }

    /// Batched forward pass. `masks` holds either one mask shared by every
    /// row or one mask per row.
    pub fn forward_batch(&self, input: ArrayView2<f64>, masks: &[DropoutMask]) -> Result<ForwardCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        if masks.len() != 1 && masks.len() != input.nrows() {
            return Err(Error::shape("need one shared mask or one mask per row"));
        }
        for m in masks {
            self.check_mask(m)?;
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }

        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut post = Vec::with_capacity(self.trunk.len());
        let mut scales = Vec::with_capacity(self.trunk.len());
        for (l, layer) in self.trunk.iter().enumerate() {
            let z = layer.apply(post.last().map_or(input.view(), |h: &Array2<f64>| h.view()));
            let scale = if masks.len() == 1 {
                masks[0].scale(l).insert_axis(Axis(0))
            } else {
                let mut s = Array2::zeros((masks.len(), layer.output_dim()));
                for (mut row, m) in s.rows_mut().into_iter().zip(masks) {
                    row.assign(&m.scale(l));
                }
                s
            };
            let h = z.mapv(silu) * &scale;
            pre.push(z);
            post.push(h);
            scales.push(scale);
        }
        let last = post.last().expect("non-empty trunk").view();
        let mean = self.mean_head.apply(last);
        let raw_var = self.var_head.apply(last);
        let bounds = self.variance_bounds;
        let var = raw_var.mapv(|r| bounds.map(r));
        Ok(ForwardCache {
            input: input.to_owned(),
            pre,
            post,
            scales,
            raw_var,
            mean,
            var,
        })
    }

    /// Mean head only, one shared mask, no shape checks beyond debug
    /// assertions. This is the hot path used by planning rollouts.
    pub fn forward_mean(&self, input: ArrayView2<f64>, mask: &DropoutMask) -> Array2<f64> {
        debug_assert_eq!(input.ncols(), self.input_dim());
        let mut h = input.to_owned();
        for (l, layer) in self.trunk.iter().enumerate() {
            let scale = mask.scale(l);
            let mut z = layer.apply(h.view());
            for mut row in z.rows_mut() {
                row.zip_mut_with(&scale, |v, &s| *v = if s == 0.0 { 0.0 } else { silu(*v) * s });
            }
            h = z;
        }
        self.mean_head.apply(h.view())
    }

    /// Backpropagates output gradients `d_mean`, `d_var` (gradients of a
    /// scalar loss with respect to the mean and the mapped variance) through
    /// the pass recorded in `cache`. Returns parameter gradients and the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_mean: ArrayView2<f64>,
        d_var: ArrayView2<f64>,
    ) -> Result<(MlpWeights, Array2<f64>)> {
        if d_mean.dim() != cache.mean.dim() || d_var.dim() != cache.var.dim() {
            return Err(Error::shape("output gradient shape differs from forward outputs"));
        }
        let mut grads = self.zeros_like();
        let bounds = self.variance_bounds;
        let mut d_raw = d_var.to_owned();
        d_raw.zip_mut_with(&cache.raw_var, |g, &r| *g *= bounds.map_grad(r));

        let last = cache.post.last().expect("non-empty trunk");
        grads.mean_head.weight = last.t().dot(&d_mean);
        grads.mean_head.bias = d_mean.sum_axis(Axis(0));
        grads.var_head.weight = last.t().dot(&d_raw);
        grads.var_head.bias = d_raw.sum_axis(Axis(0));
        let mut d_h = d_mean.dot(&self.mean_head.weight.t()) + d_raw.dot(&self.var_head.weight.t());

        for l in (0..self.trunk.len()).rev() {
            let mut d_z = d_h * &cache.scales[l];
            d_z.zip_mut_with(&cache.pre[l], |g, &z| *g *= silu_grad(z));
            let prev = if l == 0 {
                cache.input.view()
            } else {
                cache.post[l - 1].view()
            };
            grads.trunk[l].weight = prev.t().dot(&d_z);
            grads.trunk[l].bias = d_z.sum_axis(Axis(0));
            d_h = d_z.dot(&self.trunk[l].weight.t());
        }

        if let Some(layer) = grads.layers().position(|l| !l.is_finite()) {
            return Err(Error::TrainingFault {
                layer,
                reason: "non-finite gradient".into(),
            });
        }
        Ok((grads, d_h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sample_dropout_masks;
    use crate::rng;
    use ndarray::array;

    fn ones(widths: &[usize]) -> DropoutMask {
        DropoutMask::ones(widths, 1.0).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero_mean_and_mapped_zero_variance() {
        let net = MlpWeights::zeros(3, &[4, 4, 4], 2, VarianceBounds::default()).unwrap();
        let (mean, var) = net.forward(&[0.3, -1.0, 2.0], &ones(&[4, 4, 4])).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        let expected = 1e-6 + std::f64::consts::LN_2;
        for v in var {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng::derive(5, 0, 0);
        let net = MlpWeights::random(&mut r, 3, &[6, 6, 6], 2, VarianceBounds::default()).unwrap();
        let m = ones(&[6, 6, 6]);
        let a = net.forward(&[0.1, 0.2, 0.3], &m).unwrap();
        let b = net.forward(&[0.1, 0.2, 0.3], &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_two_one_network_matches_hand_composition() {
        // 1 -> [2] -> 1. Input weights (1, -2), biases (0.5, 0); head weights (3, 4), bias 1.
        let mut net = MlpWeights::zeros(1, &[2], 1, VarianceBounds::default()).unwrap();
        net.trunk[0].weight = array![[1.0, -2.0]];
        net.trunk[0].bias = array![0.5, 0.0];
        net.mean_head.weight = array![[3.0], [4.0]];
        net.mean_head.bias = array![1.0];
        let x = 0.7;
        let (mean, _) = net.forward(&[x], &ones(&[2])).unwrap();
        let expected = 3.0 * silu(x + 0.5) + 4.0 * silu(-2.0 * x) + 1.0;
        assert!((mean[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn forward_mean_matches_full_forward() {
        let mut r = rng::derive(9, 0, 0);
        let net = MlpWeights::random(&mut r, 4, &[8, 8, 8], 3, VarianceBounds::default()).unwrap();
        let mask = sample_dropout_masks(&mut r, &[8, 8, 8], 0.8, 1).unwrap().remove(0);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let full = net.forward_batch(x.view(), std::slice::from_ref(&mask)).unwrap();
        let fast = net.forward_mean(x.view(), &mask);
        for (a, b) in full.mean.iter().zip(fast.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_non_finite_input() {
        let net = MlpWeights::zeros(2, &[3, 3, 3], 1, VarianceBounds::default()).unwrap();
        let m = ones(&[3, 3, 3]);
        assert!(matches!(net.forward(&[1.0], &m), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN], &m), Err(Error::NonFinite(_))));
        assert!(matches!(net.forward(&[1.0, 2.0], &ones(&[3, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let mut r = rng::derive(2, 0, 0);
        let net = MlpWeights::random(&mut r, 4, &[8, 8, 8], 4, VarianceBounds::default()).unwrap();
        let x = Array2::from_elem((3, 4), 0.5);
        let cache = net.forward_batch(x.view(), &[ones(&[8, 8, 8])]).unwrap();
        let zero = Array2::zeros((3, 4));
        let (g, dx) = net.backward(&cache, zero.view(), zero.view()).unwrap();
        assert!(g.params().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_hidden_layer_blocks_outgoing_gradients() {
        let mut r = rng::derive(4, 0, 0);
        let net = MlpWeights::random(&mut r, 3, &[5, 5, 5], 2, VarianceBounds::default()).unwrap();
        let mut layers: Vec<Array1<f64>> = vec![Array1::ones(5); 3];
        layers[1] = Array1::zeros(5);
        let mask = DropoutMask::from_layers(layers, 0.9).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.2 - 0.5);
        let cache = net.forward_batch(x.view(), std::slice::from_ref(&mask)).unwrap();
        let d = Array2::from_elem((4, 2), 1.0);
        let (g, _) = net.backward(&cache, d.view(), d.view()).unwrap();
        // layer 2 consumes the zeroed layer-1 activations
        assert!(g.trunk[2].weight.iter().all(|&v| v == 0.0));
        assert!(g.trunk[0].weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variance_stays_within_bounds() {
        let b = VarianceBounds::default();
        for raw in [-1e3, -50.0, -1.0, 0.0, 3.0, 99.0, 1e3] {
            let v = b.map(raw);
            assert!(v >= b.floor && v <= b.ceiling, "{raw} -> {v}");
        }
    }

    #[test]
    fn validate_flags_inconsistent_layers() {
        let mut net = MlpWeights::zeros(2, &[3, 3], 1, VarianceBounds::default()).unwrap();
        assert!(net.validate().is_ok());
        net.trunk[1] = Dense::zeros(4, 3);
        assert!(net.validate().is_err());
        let mut net = MlpWeights::zeros(2, &[3, 3], 1, VarianceBounds::default()).unwrap();
        net.mean_head.bias[0] = f64::INFINITY;
        assert!(matches!(net.validate(), Err(Error::NonFinite(_))));
    }
}
