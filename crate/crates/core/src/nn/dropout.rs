use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dropout particle: a binary keep-vector per hidden layer.
///
/// Kept units are scaled by `1 / keep_prob` when applied (inverted dropout),
/// so the all-ones mask at `keep_prob = 1` leaves activations untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    keep_prob: f64,
    layers: Vec<Array1<f64>>,
}

impl DropoutMask {
    pub fn ones(widths: &[usize], keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        Ok(Self {
            keep_prob,
            layers: widths.iter().map(|&w| Array1::ones(w)).collect(),
        })
    }

    /// Builds a mask from explicit 0/1 vectors.
    pub fn from_layers(layers: Vec<Array1<f64>>, keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        if layers.iter().flatten().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("dropout mask entries must be 0 or 1"));
        }
        Ok(Self { keep_prob, layers })
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn layers(&self) -> &[Array1<f64>] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.len()).collect()
    }

    /// Multiplicative factor applied to hidden layer `layer`: mask / p.
    pub fn scale(&self, layer: usize) -> Array1<f64> {
        &self.layers[layer] / self.keep_prob
    }

    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.len()).sum();
        let kept: f64 = self.layers.iter().flatten().sum();
        kept / total as f64
    }
}

fn check_keep_prob(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("keep probability must be in (0, 1], got {p}")))
    }
}

/// Draws `count` independent Bernoulli(`keep_prob`) masks over `widths`.
pub fn sample_dropout_masks<R: Rng + ?Sized>(
    rng: &mut R,
    widths: &[usize],
    keep_prob: f64,
    count: usize,
) -> Result<Vec<DropoutMask>> {
    check_keep_prob(keep_prob)?;
    if count == 0 {
        return Err(Error::config("mask count must be at least 1"));
    }
    let masks = (0..count)
        .map(|_| {
            let layers = widths
                .iter()
                .map(|&w| {
                    Array1::from_shape_fn(w, |_| {
                        if keep_prob >= 1.0 || rng.random::<f64>() < keep_prob {
                            1.0
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            DropoutMask { keep_prob, layers }
        })
        .collect();
    Ok(masks)
}
