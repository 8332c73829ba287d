//! Probabilistic dropout-network ensembles used as the learned dynamics.

mod loss;
mod normalizer;
mod train;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use loss::{two_step_loss, two_step_loss_and_grad, LossBreakdown, LossParams, TwoStepBatch};
pub use normalizer::{NormalizerStats, STD_FLOOR};
pub use train::{MemberReport, TrainReport, TrainSchedule};

use crate::error::{Error, Result};
use crate::nn::{sample_dropout_masks, AdamConfig, AdamState, DropoutMask, MlpWeights, VarianceBounds};
use crate::rng;

/// Two consecutive steps of one episode: `(s0, a0, s1, a1, s2)` in native units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s0: Vec<f64>,
    pub a0: Vec<f64>,
    pub s1: Vec<f64>,
    pub a1: Vec<f64>,
    pub s2: Vec<f64>,
    pub episode: u64,
    pub goal: u64,
}

impl Transition {
    pub fn new(s0: Vec<f64>, a0: Vec<f64>, s1: Vec<f64>, a1: Vec<f64>, s2: Vec<f64>, episode: u64, goal: u64) -> Self {
        Self {
            s0,
            a0,
            s1,
            a1,
            s2,
            episode,
            goal,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.s0.len()
    }

    pub fn action_dim(&self) -> usize {
        self.a0.len()
    }

    pub(crate) fn is_consistent(&self, state_dim: usize, action_dim: usize) -> bool {
        self.s0.len() == state_dim
            && self.s1.len() == state_dim
            && self.s2.len() == state_dim
            && self.a0.len() == action_dim
            && self.a1.len() == action_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Ensemble size B.
    pub members: usize,
    /// Inference dropout particles M per member.
    pub particles: usize,
    pub hidden: Vec<usize>,
    pub keep_prob: f64,
    pub variance_bounds: VarianceBounds,
    /// Weight of the predicted-variance penalty.
    pub variance_penalty: f64,
    /// L2 coefficient, one per parameterised layer (trunk, mean head, variance
    /// head). A single value is broadcast to every layer.
    pub l2: Vec<f64>,
    /// Members predict a normalised state increment instead of the next state.
    pub predict_delta: bool,
    pub optimizer: AdamConfig,
    pub schedule: TrainSchedule,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            particles: 5,
            hidden: vec![512, 512, 512],
            keep_prob: 0.95,
            variance_bounds: VarianceBounds::default(),
            variance_penalty: 30.0,
            l2: vec![1e-4],
            predict_delta: false,
            optimizer: AdamConfig::default(),
            schedule: TrainSchedule::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.particles == 0 {
            return Err(Error::config("ensemble needs at least one member and one particle"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::config("keep probability must be in (0, 1]"));
        }
        let b = self.variance_bounds;
        if !(b.floor > 0.0 && b.floor < b.ceiling && b.ceiling.is_finite()) {
            return Err(Error::config("variance bounds must satisfy 0 < floor < ceiling"));
        }
        if self.variance_penalty < 0.0 || self.l2.iter().any(|&l| l < 0.0) {
            return Err(Error::config("penalty weights must be non-negative"));
        }
        let layers = self.hidden.len() + 2;
        if self.l2.len() != 1 && self.l2.len() != layers {
            return Err(Error::config(format!("l2 needs 1 or {layers} entries")));
        }
        self.schedule.validate()
    }

    pub(crate) fn loss_params(&self) -> LossParams {
        let layers = self.hidden.len() + 2;
        let l2 = if self.l2.len() == 1 {
            vec![self.l2[0]; layers]
        } else {
            self.l2.clone()
        };
        LossParams {
            variance_penalty: self.variance_penalty,
            l2,
            predict_delta: self.predict_delta,
        }
    }
}

/// B member networks sharing one set of normaliser statistics.
///
/// Between updates the inference masks are fixed, so prediction is a
/// deterministic function of the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub config: EnsembleConfig,
    state_dim: usize,
    action_dim: usize,
    seed: u64,
    updates: u64,
    members: Vec<MlpWeights>,
    optimizers: Vec<AdamState>,
    masks: Vec<Vec<DropoutMask>>,
    normalizer: NormalizerStats,
}

impl EnsembleModel {
    pub fn new(config: EnsembleConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::config("state and action dimensions must be positive"));
        }
        let mut members = Vec::with_capacity(config.members);
        let mut optimizers = Vec::with_capacity(config.members);
        for b in 0..config.members {
            let mut r = rng::derive(seed, rng::stream::INIT, b as u64);
            let net = MlpWeights::random(
                &mut r,
                state_dim + action_dim,
                &config.hidden,
                state_dim,
                config.variance_bounds,
            )?;
            optimizers.push(AdamState::new(config.optimizer, &net));
            members.push(net);
        }
        let mut model = Self {
            normalizer: NormalizerStats::identity(state_dim, action_dim),
            config,
            state_dim,
            action_dim,
            seed,
            updates: 0,
            members,
            optimizers,
            masks: Vec::new(),
        };
        model.resample_inference_masks()?;
        Ok(model)
    }

    /// Builds a model from explicit member weights, with all-ones inference
    /// masks and identity normalisation. Mostly useful for tests and tools.
    pub fn from_members(config: EnsembleConfig, members: Vec<MlpWeights>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::config("ensemble needs at least one member"))?;
        let state_dim = first.output_dim();
        let action_dim = first
            .input_dim()
            .checked_sub(state_dim)
            .filter(|&a| a > 0)
            .ok_or_else(|| Error::shape("member input must be state plus action"))?;
        for m in &members {
            m.validate()?;
            if !m.same_shape(first) {
                return Err(Error::shape("members differ in shape"));
            }
        }
        let widths = first.hidden_widths();
        let config = EnsembleConfig {
            members: members.len(),
            particles: 1,
            hidden: widths.clone(),
            keep_prob: 1.0,
            ..config
        };
        let masks = vec![vec![DropoutMask::ones(&widths, 1.0)?]; members.len()];
        let optimizers = members.iter().map(|m| AdamState::new(config.optimizer, m)).collect();
        Ok(Self {
            normalizer: NormalizerStats::identity(state_dim, action_dim),
            config,
            state_dim,
            action_dim,
            seed: 0,
            updates: 0,
            members,
            optimizers,
            masks,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of completed model updates.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn members(&self) -> &[MlpWeights] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [MlpWeights] {
        &mut self.members
    }

    pub fn inference_masks(&self) -> &[Vec<DropoutMask>] {
        &self.masks
    }

    pub fn normalizer(&self) -> &NormalizerStats {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, stats: NormalizerStats) -> Result<()> {
        if stats.state_dim() != self.state_dim || stats.action_dim() != self.action_dim {
            return Err(Error::shape("normaliser dimensions differ from model"));
        }
        self.normalizer = stats;
        Ok(())
    }

    pub(crate) fn resample_inference_masks(&mut self) -> Result<()> {
        let mut r = rng::derive(self.seed, rng::stream::INFERENCE_MASKS, self.updates);
        self.masks = (0..self.members.len())
            .map(|_| {
                sample_dropout_masks(
                    &mut r,
                    &self.config.hidden,
                    self.config.keep_prob,
                    self.config.particles,
                )
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    fn check_inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<()> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(Error::shape(format!(
                "expected state dim {} and action dim {}, got {} and {}",
                self.state_dim,
                self.action_dim,
                states.ncols(),
                actions.ncols()
            )));
        }
        if states.nrows() != actions.nrows() {
            return Err(Error::shape("state and action batches differ in length"));
        }
        if states.iter().chain(actions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction input".into()));
        }
        Ok(())
    }

    fn network_input(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let sn = self.normalizer.normalize_states(states);
        let an = self.normalizer.normalize_actions(actions);
        let x = concatenate(Axis(1), &[sn.view(), an.view()]).expect("matching rows");
        (sn, x)
    }

    /// Ensemble-mean next state for a batch of `(state, action)` rows:
    /// the average of all B·M particle means, mapped back to native units.
    pub fn predict_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(states, actions)?;
        let (sn, x) = self.network_input(states, actions);
        let mut acc = Array2::<f64>::zeros((states.nrows(), self.state_dim));
        let mut count = 0usize;
        for (net, masks) in self.members.iter().zip(&self.masks) {
            for mask in masks {
                acc += &net.forward_mean(x.view(), mask);
                count += 1;
            }
        }
        acc /= count as f64;
        if self.config.predict_delta {
            acc += &sn;
        }
        Ok(self.normalizer.denormalize_states(acc.view()))
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.predict_batch(s, a)?.row(0).to_vec())
    }

    /// Every `(member, particle)` Gaussian component in native units,
    /// member-major.
    pub fn predict_members(&self, state: &[f64], action: &[f64]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| Error::shape(e.to_string()))?;
        self.check_inputs(s, a)?;
        let (sn, x) = self.network_input(s, a);
        let std = &self.normalizer.state_std;
        let mut out = Vec::with_capacity(self.members.len() * self.config.particles);
        for (net, masks) in self.members.iter().zip(&self.masks) {
            for mask in masks {
                let cache = net.forward_batch(x.view(), std::slice::from_ref(mask))?;
                let mut mean = cache.mean.row(0).to_owned();
                if self.config.predict_delta {
                    mean += &sn.row(0);
                }
                let mean = self.normalizer.denormalize_state(mean.as_slice().expect("contiguous"));
                let var = cache
                    .var
                    .row(0)
                    .iter()
                    .zip(std.iter())
                    .map(|(v, sd)| v * sd * sd)
                    .collect();
                out.push((mean, var));
            }
        }
        Ok(out)
    }

    /// Standard deviation of the component means, averaged over state
    /// dimensions.
    pub fn disagreement(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let comps = self.predict_members(state, action)?;
        let n = comps.len() as f64;
        let mut total = 0.0;
        for d in 0..self.state_dim {
            let mean = comps.iter().map(|c| c.0[d]).sum::<f64>() / n;
            let var = comps.iter().map(|c| (c.0[d] - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        Ok(total / self.state_dim as f64)
    }

    /// Total predictive variance (mean aleatoric variance plus spread of the
    /// component means), averaged over state dimensions.
    pub fn predictive_variance(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let comps = self.predict_members(state, action)?;
        let n = comps.len() as f64;
        let mut total = 0.0;
        for d in 0..self.state_dim {
            let mean = comps.iter().map(|c| c.0[d]).sum::<f64>() / n;
            let spread = comps.iter().map(|c| (c.0[d] - mean).powi(2)).sum::<f64>() / n;
            let aleatoric = comps.iter().map(|c| c.1[d]).sum::<f64>() / n;
            total += spread + aleatoric;
        }
        Ok(total / self.state_dim as f64)
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Vec<MlpWeights>, &mut Vec<AdamState>) {
        (&mut self.members, &mut self.optimizers)
    }

    pub(crate) fn bump_updates(&mut self) {
        self.updates += 1;
    }

    pub fn optimizers(&self) -> &[AdamState] {
        &self.optimizers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config() -> EnsembleConfig {
        EnsembleConfig {
            members: 1,
            particles: 1,
            hidden: vec![3],
            keep_prob: 1.0,
            ..EnsembleConfig::default()
        }
    }

    /// Network whose mean head emits the constant `value` regardless of input.
    fn constant_member(value: f64) -> MlpWeights {
        let mut net = MlpWeights::zeros(2, &[3], 1, VarianceBounds::default()).unwrap();
        net.mean_head.bias = array![value];
        net
    }

    fn with_stats(mut model: EnsembleModel) -> EnsembleModel {
        model
            .set_normalizer(NormalizerStats {
                state_mean: array![10.0],
                state_std: array![2.0],
                action_mean: array![0.0],
                action_std: array![1.0],
            })
            .unwrap();
        model
    }

    #[test]
    fn unanimous_members_denormalize_exactly() {
        let model = with_stats(EnsembleModel::from_members(small_config(), vec![constant_member(0.5); 3]).unwrap());
        assert_eq!(model.predict(&[1.0], &[0.2]).unwrap(), vec![11.0]);
        let comps = model.predict_members(&[1.0], &[0.2]).unwrap();
        assert_eq!(comps.len(), 3);
        assert!(comps.iter().all(|c| c == &comps[0]));
    }

    #[test]
    fn single_member_equals_its_own_mean() {
        let model = with_stats(EnsembleModel::from_members(small_config(), vec![constant_member(-1.5)]).unwrap());
        assert_eq!(model.predict(&[0.0], &[0.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn two_members_average_in_normalized_space() {
        let model = with_stats(
            EnsembleModel::from_members(small_config(), vec![constant_member(1.0), constant_member(2.0)]).unwrap(),
        );
        // de-normalize((1 + 2) / 2) = 1.5 * 2 + 10
        assert_eq!(model.predict(&[0.0], &[0.0]).unwrap(), vec![13.0]);
        let swapped = with_stats(
            EnsembleModel::from_members(small_config(), vec![constant_member(2.0), constant_member(1.0)]).unwrap(),
        );
        assert_eq!(
            swapped.predict(&[3.0], &[1.0]).unwrap(),
            model.predict(&[3.0], &[1.0]).unwrap()
        );
    }

    #[test]
    fn component_count_is_members_times_particles() {
        let config = EnsembleConfig {
            members: 3,
            particles: 4,
            hidden: vec![8, 8, 8],
            ..EnsembleConfig::default()
        };
        let model = EnsembleModel::new(config, 2, 1, 1).unwrap();
        assert_eq!(model.predict_members(&[0.0, 1.0], &[0.5]).unwrap().len(), 12);
    }

    #[test]
    fn prediction_rejects_bad_input() {
        let model = EnsembleModel::new(
            EnsembleConfig {
                hidden: vec![4, 4, 4],
                ..EnsembleConfig::default()
            },
            2,
            1,
            0,
        )
        .unwrap();
        assert!(matches!(
            model.predict(&[f64::NAN, 0.0], &[0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(model.predict(&[0.0], &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_is_deterministic_between_updates() {
        let config = EnsembleConfig {
            hidden: vec![8, 8, 8],
            ..EnsembleConfig::default()
        };
        let model = EnsembleModel::new(config, 2, 1, 42).unwrap();
        let a = model.predict(&[0.1, 0.2], &[0.3]).unwrap();
        let b = model.predict(&[0.1, 0.2], &[0.3]).unwrap();
        assert_eq!(a, b);
    }
}
