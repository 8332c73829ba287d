//! Receding-horizon action search: deterministic mean rollouts through a
//! learned model, a reward objective with a state-smoothing penalty, and the
//! cross-entropy method over flattened action sequences.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::rng;

/// Anything that maps a batch of `(state, action)` rows to next states.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::Shape(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict_batch(s, a)?.row(0).to_vec())
    }
}

impl Dynamics for EnsembleModel {
    fn state_dim(&self) -> usize {
        EnsembleModel::state_dim(self)
    }

    fn action_dim(&self) -> usize {
        EnsembleModel::action_dim(self)
    }

    fn predict_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        EnsembleModel::predict_batch(self, states, actions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial sampling std as a fraction of each action range.
    pub init_std_fraction: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Weight of the L1 state-change penalty.
    pub smoothing: f64,
    /// Seed the sampling mean with the previous plan shifted by the executed
    /// chunk.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            population: 400,
            elites: 40,
            iterations: 5,
            init_std_fraction: 0.25,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            smoothing: 0.01,
            warm_start: true,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::config("horizon and iteration count must be positive"));
        }
        if !(self.elites > 0 && self.elites < self.population) {
            return Err(Error::config("need 0 < elites < population"));
        }
        if self.action_low.len() != self.action_high.len() || self.action_low.is_empty() {
            return Err(Error::config("action bounds must have one entry per action dimension"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(Error::config("action bounds must be finite with low < high"));
        }
        if self.init_std_fraction.is_nan() || self.init_std_fraction <= 0.0 || self.smoothing < 0.0 {
            return Err(Error::config(
                "std fraction must be positive and smoothing non-negative",
            ));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }
}

/// Previous plan and the number of its leading actions that have been (or
/// will have been) executed before the new plan takes over.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub actions: Vec<Vec<f64>>,
    pub shift: usize,
}

impl WarmStart {
    /// Shifts left by `shift` and pads the tail by repeating the last action.
    pub fn shifted(&self, horizon: usize) -> Vec<Vec<f64>> {
        let last = self.actions.last().cloned().unwrap_or_default();
        (0..horizon)
            .map(|h| {
                self.actions
                    .get(h + self.shift)
                    .cloned()
                    .unwrap_or_else(|| last.clone())
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub mean_elite: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub actions: Vec<Vec<f64>>,
    /// `horizon + 1` predicted states starting at the planning state.
    pub states: Vec<Vec<f64>>,
    pub objective: f64,
    pub trace: Vec<IterationStat>,
}

/// Chains `model.predict` through `actions`; returns `len + 1` states.
/// A non-finite intermediate state aborts with [`Error::NonFinite`].
pub fn rollout<D: Dynamics + ?Sized>(model: &D, s0: &[f64], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(s0.to_vec());
    for a in actions {
        let next = model.predict(states.last().expect("non-empty"), a)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rollout state".into()));
        }
        states.push(next);
    }
    Ok(states)
}

/// `Σ_h ‖s_{h+1} − s_h‖₁`.
pub fn smoothness(states: &[Vec<f64>]) -> f64 {
    states
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a).abs()).sum::<f64>())
        .sum()
}

/// `Σ_{h<H} R(s_h, a_h) − λ Σ_h ‖s_{h+1} − s_h‖₁`. Non-finite states give
/// `-∞`.
pub fn objective<R>(states: &[Vec<f64>], actions: &[Vec<f64>], reward: &R, smoothing: f64) -> Result<f64>
where
    R: Fn(&[f64], &[f64]) -> f64 + ?Sized,
{
    if states.len() != actions.len() + 1 {
        return Err(Error::shape("objective needs one more state than actions"));
    }
    if states.iter().flatten().any(|v| !v.is_finite()) {
        return Ok(f64::NEG_INFINITY);
    }
    let total_reward: f64 = states.iter().zip(actions).map(|(s, a)| reward(s, a)).sum();
    Ok(total_reward - smoothing * smoothness(states))
}

/// Cross-entropy-method planner.
#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
}

struct Evaluated {
    objectives: Vec<f64>,
    trajectories: Vec<Array2<f64>>,
}

impl Planner {
    pub fn new(config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Rolls every candidate row (flattened `H x A` actions) through the
    /// model in one batch per step.
    fn evaluate<D, R>(&self, model: &D, s0: &[f64], candidates: &Array2<f64>, reward: &R) -> Result<Evaluated>
    where
        D: Dynamics + ?Sized,
        R: Fn(&[f64], &[f64]) -> f64 + ?Sized,
    {
        let (n, h_len, ad) = (candidates.nrows(), self.config.horizon, self.config.action_dim());
        let sd = s0.len();
        let start = Array1::from(s0.to_vec());
        let mut states = start.broadcast((n, sd)).expect("broadcast").to_owned();
        let mut trajectories: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((h_len + 1, sd))).collect();
        for traj in trajectories.iter_mut() {
            traj.row_mut(0).assign(&start);
        }
        let mut rewards = vec![0.0; n];
        let mut motion = vec![0.0; n];
        let mut valid = vec![true; n];
        for h in 0..h_len {
            let actions = candidates.slice(s![.., h * ad..(h + 1) * ad]);
            for i in 0..n {
                if valid[i] {
                    rewards[i] += reward(
                        states.row(i).as_slice().expect("row-major"),
                        actions.row(i).to_vec().as_slice(),
                    );
                }
            }
            let mut next = model.predict_batch(states.view(), actions)?;
            for (i, mut row) in next.axis_iter_mut(Axis(0)).enumerate() {
                if !valid[i] {
                    continue;
                }
                if row.iter().any(|v| !v.is_finite()) {
                    valid[i] = false;
                    // keep the batch finite; the row is ignored from here on
                    row.assign(&start);
                    continue;
                }
                motion[i] += row.iter().zip(states.row(i)).map(|(b, a)| (b - a).abs()).sum::<f64>();
                trajectories[i].row_mut(h + 1).assign(&row);
            }
            states = next;
        }
        let objectives = (0..n)
            .map(|i| {
                if valid[i] {
                    rewards[i] - self.config.smoothing * motion[i]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(Evaluated {
            objectives,
            trajectories,
        })
    }

    /// Runs CEM from `s0`. `plan_id` selects the random stream, so a fixed
    /// `(seed, plan_id)` pair always yields the same result.
    pub fn plan<D, R>(
        &self,
        model: &D,
        s0: &[f64],
        reward: &R,
        warm_start: Option<&WarmStart>,
        plan_id: u64,
    ) -> Result<PlanResult>
    where
        D: Dynamics + ?Sized,
        R: Fn(&[f64], &[f64]) -> f64 + ?Sized,
    {
        let c = &self.config;
        if s0.len() != model.state_dim() || c.action_dim() != model.action_dim() {
            return Err(Error::shape("planner and model disagree on dimensions"));
        }
        if s0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("planning start state".into()));
        }
        let (h_len, ad) = (c.horizon, c.action_dim());
        let dim = h_len * ad;
        let low = Array1::from_shape_fn(dim, |k| c.action_low[k % ad]);
        let high = Array1::from_shape_fn(dim, |k| c.action_high[k % ad]);

        let mut mean = match warm_start {
            Some(ws) if c.warm_start => {
                let shifted = ws.shifted(h_len);
                if shifted.iter().any(|a| a.len() != ad) {
                    return Err(Error::shape("warm start has the wrong action dimension"));
                }
                Array1::from_iter(shifted.into_iter().flatten())
            }
            _ => (&low + &high) / 2.0,
        };
        mean.zip_mut_with(&low, |m, &l| *m = m.max(l));
        mean.zip_mut_with(&high, |m, &h| *m = m.min(h));
        let mut std = (&high - &low) * c.init_std_fraction;

        let mut r = rng::derive(c.seed, rng::stream::PLAN, plan_id);
        let mut best: Option<(f64, Array1<f64>, Array2<f64>)> = None;
        let mut trace = Vec::with_capacity(c.iterations);
        for it in 0..c.iterations {
            let mut candidates = Array2::from_shape_fn((c.population, dim), |(_, k)| {
                let z: f64 = StandardNormal.sample(&mut r);
                (mean[k] + std[k] * z).clamp(low[k], high[k])
            });
            if it == 0 {
                // the unperturbed mean competes too
                candidates.row_mut(0).assign(&mean);
            }
            let eval = self.evaluate(model, s0, &candidates, reward)?;
            let mut order: Vec<usize> = (0..c.population).collect();
            order.sort_by(|&a, &b| eval.objectives[b].total_cmp(&eval.objectives[a]));
            let top = order[0];
            if eval.objectives[top] > best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0) {
                best = Some((
                    eval.objectives[top],
                    candidates.row(top).to_owned(),
                    eval.trajectories[top].clone(),
                ));
            }
            let elites: Vec<usize> = order[..c.elites]
                .iter()
                .copied()
                .filter(|&i| eval.objectives[i].is_finite())
                .collect();
            let best_so_far = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            if elites.is_empty() {
                trace.push(IterationStat {
                    mean_elite: f64::NEG_INFINITY,
                    best_so_far,
                });
                continue;
            }
            let elite = candidates.select(Axis(0), &elites);
            mean = elite.mean_axis(Axis(0)).expect("non-empty elites");
            std = elite.std_axis(Axis(0), 0.0);
            let mean_elite = elites.iter().map(|&i| eval.objectives[i]).sum::<f64>() / elites.len() as f64;
            trace.push(IterationStat {
                mean_elite,
                best_so_far,
            });
        }

        match best {
            Some((objective, actions, traj)) if objective.is_finite() => Ok(PlanResult {
                actions: actions
                    .as_slice()
                    .expect("contiguous")
                    .chunks(ad)
                    .map(<[f64]>::to_vec)
                    .collect(),
                states: traj.rows().into_iter().map(|r| r.to_vec()).collect(),
                objective,
                trace,
            }),
            _ => Err(Error::Planning("every candidate rollout was invalid".into())),
        }
    }
}
