use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Transition;
use crate::error::{Error, Result};

/// Smallest standard deviation a feature may be assigned.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension mean and standard deviation of states and actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub state_mean: Array1<f64>,
    pub state_std: Array1<f64>,
    pub action_mean: Array1<f64>,
    pub action_std: Array1<f64>,
}

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Array1<f64>, Array1<f64>) {
    let mut count = 0usize;
    let mut mean = Array1::<f64>::zeros(dim);
    let mut m2 = Array1::<f64>::zeros(dim);
    // Welford
    for row in rows {
        count += 1;
        for d in 0..dim {
            let delta = row[d] - mean[d];
            mean[d] += delta / count as f64;
            m2[d] += delta * (row[d] - mean[d]);
        }
    }
    let std = m2.mapv(|v| (v / count as f64).sqrt().max(STD_FLOOR));
    (mean, std)
}

impl NormalizerStats {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: Array1::zeros(state_dim),
            state_std: Array1::ones(state_dim),
            action_mean: Array1::zeros(action_dim),
            action_std: Array1::ones(action_dim),
        }
    }

    /// Fits statistics over every state and action occurrence in `dataset`
    /// (three states and two actions per transition).
    pub fn fit(dataset: &[Transition]) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::config("cannot fit normaliser on an empty dataset"))?;
        let (sd, ad) = (first.state_dim(), first.action_dim());
        if dataset.iter().any(|t| !t.is_consistent(sd, ad)) {
            return Err(Error::shape("transitions disagree on state/action dimension"));
        }
        let (state_mean, state_std) = moments(
            dataset
                .iter()
                .flat_map(|t| [t.s0.as_slice(), t.s1.as_slice(), t.s2.as_slice()]),
            sd,
        );
        let (action_mean, action_std) = moments(dataset.iter().flat_map(|t| [t.a0.as_slice(), t.a1.as_slice()]), ad);
        Ok(Self {
            state_mean,
            state_std,
            action_mean,
            action_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(self.state_std.iter()))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.state_mean.iter().zip(self.state_std.iter()))
            .map(|(x, (m, sd))| x * sd + m)
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_mean.iter().zip(self.action_std.iter()))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    pub fn normalize_states(&self, s: ArrayView2<f64>) -> Array2<f64> {
        (&s - &self.state_mean) / &self.state_std
    }

    pub fn denormalize_states(&self, z: ArrayView2<f64>) -> Array2<f64> {
        &z * &self.state_std + &self.state_mean
    }

    pub fn normalize_actions(&self, a: ArrayView2<f64>) -> Array2<f64> {
        (&a - &self.action_mean) / &self.action_std
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_transitions(values: &[f64]) -> Vec<Transition> {
        // every state slot carries the same value so occurrences weigh equally
        values
            .iter()
            .map(|&v| Transition::new(vec![v], vec![v], vec![v], vec![v], vec![v], 0, 0))
            .collect()
    }

    #[test]
    fn two_point_case() {
        let stats = NormalizerStats::fit(&scalar_transitions(&[1.0, 3.0])).unwrap();
        assert_eq!(stats.state_mean[0], 2.0);
        assert_eq!(stats.state_std[0], 1.0);
        assert_eq!(stats.action_std[0], 1.0);
    }

    #[test]
    fn constant_feature_is_floored() {
        let stats = NormalizerStats::fit(&scalar_transitions(&[5.0; 4])).unwrap();
        assert_eq!(stats.state_mean[0], 5.0);
        assert_eq!(stats.state_std[0], STD_FLOOR);
    }

    #[test]
    fn standard_normal_sample() {
        let mut r = rng::derive(21, 0, 0);
        let values: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        let stats = NormalizerStats::fit(&scalar_transitions(&values)).unwrap();
        assert!(stats.state_mean[0].abs() <= 0.1);
        assert!((0.9..=1.1).contains(&stats.state_std[0]));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(NormalizerStats::fit(&[]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_round_trips(
            x in prop::collection::vec(-1e6f64..1e6, 3),
            mean in prop::collection::vec(-1e3f64..1e3, 3),
            std in prop::collection::vec(STD_FLOOR..1e3, 3),
        ) {
            let stats = NormalizerStats {
                state_mean: Array1::from(mean),
                state_std: Array1::from(std),
                action_mean: Array1::zeros(1),
                action_std: Array1::ones(1),
            };
            let back = stats.denormalize_state(&stats.normalize_state(&x));
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
