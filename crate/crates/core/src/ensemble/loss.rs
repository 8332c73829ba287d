//! Two-step Gaussian negative log-likelihood with a predicted-variance
//! penalty and per-layer L2 regularisation.
//!
//! For one member and a batch of N normalised two-step samples:
//!
//! ```text
//! L = 1/N Σ_n [ Σ_d E_d²/σ²_d + log σ²_d            (step 1)
//!             + Σ_d E'_d²/σ'²_d + log σ'²_d          (step 2)
//!             + Δ (Σ_d σ²_d + Σ_d σ'²_d) ]           (variance penalty)
//!     + Σ_l λ_l ‖W_l‖²
//! ```
//!
//! `E = μ(s_t, a_t) − s_{t+1}`. The step-2 input state is the member's own
//! step-1 mean, `E' = μ(ŝ_{t+1}, a_{t+1}) − s_{t+2}`, and both steps share
//! the same dropout mask per sample.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{NormalizerStats, Transition};
use crate::error::{Error, Result};
use crate::nn::{DropoutMask, MlpWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub variance_penalty: f64,
    /// One coefficient per parameterised layer.
    pub l2: Vec<f64>,
    pub predict_delta: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step1_nll: f64,
    pub step2_nll: f64,
    pub variance_penalty: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(step1_nll: f64, step2_nll: f64, variance_penalty: f64, l2: f64) -> Self {
        Self {
            step1_nll,
            step2_nll,
            variance_penalty,
            l2,
            total: step1_nll + step2_nll + variance_penalty + l2,
        }
    }
}

/// Normalised two-step samples, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStepBatch {
    pub s0: Array2<f64>,
    pub a0: Array2<f64>,
    pub s1: Array2<f64>,
    pub a1: Array2<f64>,
    pub s2: Array2<f64>,
}

impl TwoStepBatch {
    pub fn from_transitions(transitions: &[Transition], stats: &NormalizerStats) -> Result<Self> {
        let n = transitions.len();
        let (sd, ad) = (stats.state_dim(), stats.action_dim());
        if transitions.iter().any(|t| !t.is_consistent(sd, ad)) {
            return Err(Error::shape("transition dimensions differ from normaliser"));
        }
        let gather = |f: &dyn Fn(&Transition) -> &Vec<f64>, dim: usize| {
            Array2::from_shape_fn((n, dim), |(i, j)| f(&transitions[i])[j])
        };
        Ok(Self {
            s0: stats.normalize_states(gather(&|t| &t.s0, sd).view()),
            a0: stats.normalize_actions(gather(&|t| &t.a0, ad).view()),
            s1: stats.normalize_states(gather(&|t| &t.s1, sd).view()),
            a1: stats.normalize_actions(gather(&|t| &t.a1, ad).view()),
            s2: stats.normalize_states(gather(&|t| &t.s2, sd).view()),
        })
    }

    pub fn len(&self) -> usize {
        self.s0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            s0: self.s0.select(Axis(0), rows),
            a0: self.a0.select(Axis(0), rows),
            s1: self.s1.select(Axis(0), rows),
            a1: self.a1.select(Axis(0), rows),
            s2: self.s2.select(Axis(0), rows),
        }
    }
}

fn nll_and_grads(
    pred: ArrayView2<f64>,
    var: ArrayView2<f64>,
    target: ArrayView2<f64>,
    penalty: f64,
    scale: f64,
) -> (f64, f64, Array2<f64>, Array2<f64>) {
    let mut nll = 0.0;
    let mut var_sum = 0.0;
    let mut d_pred = Array2::zeros(pred.dim());
    let mut d_var = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut d_pred)
        .and(&mut d_var)
        .and(pred)
        .and(var)
        .and(target)
        .for_each(|dp, dv, &p, &v, &t| {
            let e = p - t;
            nll += e * e / v + v.ln();
            var_sum += v;
            *dp = 2.0 * e / v * scale;
            *dv = (1.0 / v - e * e / (v * v) + penalty) * scale;
        });
    (nll * scale, var_sum * scale, d_pred, d_var)
}

fn check(weights: &MlpWeights, batch: &TwoStepBatch, masks: &[DropoutMask], params: &LossParams) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::config("loss needs a non-empty batch"));
    }
    if params.l2.len() != weights.num_layers() {
        return Err(Error::config("one l2 coefficient per layer required"));
    }
    if weights.output_dim() != batch.s0.ncols() || weights.input_dim() != batch.s0.ncols() + batch.a0.ncols() {
        return Err(Error::shape("batch dimensions do not match the network"));
    }
    if masks.len() != 1 && masks.len() != batch.len() {
        return Err(Error::shape("need one shared mask or one mask per sample"));
    }
    Ok(())
}

/// Loss value and its gradient with respect to every parameter of `weights`.
pub fn two_step_loss_and_grad(
    weights: &MlpWeights,
    batch: &TwoStepBatch,
    masks: &[DropoutMask],
    params: &LossParams,
) -> Result<(LossBreakdown, MlpWeights)> {
    check(weights, batch, masks, params)?;
    let n = batch.len() as f64;
    let sd = batch.s0.ncols();
    let inv_n = 1.0 / n;

    let x1 = concatenate(Axis(1), &[batch.s0.view(), batch.a0.view()]).expect("rows agree");
    let c1 = weights.forward_batch(x1.view(), masks)?;
    let mut pred1 = c1.mean.clone();
    if params.predict_delta {
        pred1 += &batch.s0;
    }

    let x2 = concatenate(Axis(1), &[pred1.view(), batch.a1.view()]).expect("rows agree");
    let c2 = weights.forward_batch(x2.view(), masks)?;
    let mut pred2 = c2.mean.clone();
    if params.predict_delta {
        pred2 += &pred1;
    }

    let (nll1, var1, d_pred1_direct, d_var1) = nll_and_grads(
        pred1.view(),
        c1.var.view(),
        batch.s1.view(),
        params.variance_penalty,
        inv_n,
    );
    let (nll2, var2, d_pred2, d_var2) = nll_and_grads(
        pred2.view(),
        c2.var.view(),
        batch.s2.view(),
        params.variance_penalty,
        inv_n,
    );

    let (mut grads, d_x2) = weights.backward(&c2, d_pred2.view(), d_var2.view())?;
    // the step-1 mean feeds the step-2 input state
    let mut d_pred1 = d_pred1_direct + d_x2.slice(s![.., ..sd]);
    if params.predict_delta {
        d_pred1 += &d_pred2;
    }
    let (g1, _) = weights.backward(&c1, d_pred1.view(), d_var1.view())?;

    let mut l2 = 0.0;
    for (((g, g1l), w), &lambda) in grads
        .layers_mut()
        .zip(g1.layers())
        .zip(weights.layers())
        .zip(&params.l2)
    {
        g.weight += &g1l.weight;
        g.bias += &g1l.bias;
        if lambda > 0.0 {
            g.weight.scaled_add(2.0 * lambda, &w.weight);
            g.bias.scaled_add(2.0 * lambda, &w.bias);
            l2 += lambda * (w.weight.iter().chain(w.bias.iter()).map(|v| v * v).sum::<f64>());
        }
    }

    let breakdown = LossBreakdown::new(nll1, nll2, params.variance_penalty * (var1 + var2), l2);
    if !breakdown.total.is_finite() {
        return Err(Error::TrainingFault {
            layer: usize::MAX,
            reason: format!("non-finite loss {breakdown:?}"),
        });
    }
    Ok((breakdown, grads))
}

/// Loss value only.
pub fn two_step_loss(
    weights: &MlpWeights,
    batch: &TwoStepBatch,
    masks: &[DropoutMask],
    params: &LossParams,
) -> Result<LossBreakdown> {
    check(weights, batch, masks, params)?;
    let n = batch.len() as f64;
    let x1 = concatenate(Axis(1), &[batch.s0.view(), batch.a0.view()]).expect("rows agree");
    let c1 = weights.forward_batch(x1.view(), masks)?;
    let mut pred1 = c1.mean;
    if params.predict_delta {
        pred1 += &batch.s0;
    }
    let x2 = concatenate(Axis(1), &[pred1.view(), batch.a1.view()]).expect("rows agree");
    let c2 = weights.forward_batch(x2.view(), masks)?;
    let mut pred2 = c2.mean;
    if params.predict_delta {
        pred2 += &pred1;
    }
    let (nll1, var1, _, _) = nll_and_grads(pred1.view(), c1.var.view(), batch.s1.view(), 0.0, 1.0 / n);
    let (nll2, var2, _, _) = nll_and_grads(pred2.view(), c2.var.view(), batch.s2.view(), 0.0, 1.0 / n);
    let l2: f64 = weights
        .layer_sq_norms()
        .iter()
        .zip(&params.l2)
        .map(|(norm, lambda)| lambda * norm)
        .sum();
    let breakdown = LossBreakdown::new(nll1, nll2, params.variance_penalty * (var1 + var2), l2);
    if !breakdown.total.is_finite() {
        return Err(Error::TrainingFault {
            layer: usize::MAX,
            reason: format!("non-finite loss {breakdown:?}"),
        });
    }
    Ok(breakdown)
}
