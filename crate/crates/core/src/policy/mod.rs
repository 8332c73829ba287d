//! Asynchronous chunked MPC execution.
//!
//! A planner activity and an executor activity share an [`ActionBuffer`] and
//! a [`StateBuffer`]. With chunk size `x`, the planner reads the newest
//! observed state `s_t`, predicts `ŝ_{t+x}` through the `x` actions that
//! will run in the meantime, optimises from there and commits the first `x`
//! actions of the new plan for ticks `t+x .. t+2x`.

mod buffer;
mod control;

pub use buffer::{ActionBuffer, BufferedAction, StateBuffer};
pub use control::{run_control_loop, run_feedback, run_synchronous_mpc, EnvHandle, SimEnv};

use serde::{Deserialize, Serialize};

use crate::envs::Goal;
use crate::error::{Error, Result};
use crate::planner::{rollout, Dynamics};

/// Plant control rate and planner throughput, both in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPair {
    pub system_hz: f64,
    pub mpc_hz: f64,
}

/// `x = ⌈ν_system / ν_MPC⌉`.
pub fn compute_chunk_size(freqs: FrequencyPair) -> Result<usize> {
    let FrequencyPair { system_hz, mpc_hz } = freqs;
    if !(system_hz > 0.0 && mpc_hz > 0.0 && system_hz.is_finite() && mpc_hz.is_finite()) {
        return Err(Error::config("frequencies must be positive and finite"));
    }
    Ok(((system_hz / mpc_hz).ceil() as usize).max(1))
}

/// State reached from `state` after the not-yet-executed `pending` actions.
pub fn predict_future_state<D: Dynamics + ?Sized>(model: &D, state: &[f64], pending: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(rollout(model, state, pending)?
        .pop()
        .expect("rollout includes the start state"))
}

/// How far ahead of a chunk the planner starts working on it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanningLead {
    /// Start `x` ticks early from a predicted state; the asynchronous protocol.
    #[default]
    Chunk,
    /// Plan from the freshly observed state at the chunk boundary. Only
    /// deadline-safe with a zero-latency planner; with `x = 1` this is plain
    /// synchronous MPC.
    Immediate,
}

/// Scripted planner latency, in system ticks, for virtual-clock runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencySchedule {
    Constant(f64),
    /// Latency of job `k` (1-based; the prefill plan has no deadline) is
    /// entry `k - 1`; the last entry repeats.
    Sequence(Vec<f64>),
}

impl LatencySchedule {
    pub fn latency(&self, job: u64) -> f64 {
        match self {
            LatencySchedule::Constant(l) => *l,
            LatencySchedule::Sequence(v) => {
                let i = (job.saturating_sub(1) as usize).min(v.len().saturating_sub(1));
                v.get(i).copied().unwrap_or(0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Deterministic interleaving driven by a latency script.
    Virtual(LatencySchedule),
    /// Real threads; the executor ticks at `system_hz`.
    WallClock { system_hz: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub chunk: usize,
    pub lead: PlanningLead,
    pub clock: Clock,
}

impl LoopConfig {
    pub fn virtual_clock(chunk: usize, latency: f64) -> Self {
        Self {
            chunk,
            lead: PlanningLead::Chunk,
            clock: Clock::Virtual(LatencySchedule::Constant(latency)),
        }
    }

    /// Zero-latency synchronous harness.
    pub fn synchronous(chunk: usize) -> Self {
        Self {
            chunk,
            lead: PlanningLead::Immediate,
            clock: Clock::Virtual(LatencySchedule::Constant(0.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::config("chunk size must be at least 1"));
        }
        match &self.clock {
            Clock::Virtual(LatencySchedule::Constant(l)) if !(*l >= 0.0 && l.is_finite()) => {
                Err(Error::config("latency must be finite and non-negative"))
            }
            Clock::Virtual(LatencySchedule::Sequence(v))
                if v.is_empty() || v.iter().any(|l| l.is_nan() || *l < 0.0) =>
            {
                Err(Error::config("latency sequence must be non-empty and non-negative"))
            }
            Clock::WallClock { system_hz } if system_hz.is_nan() || *system_hz <= 0.0 => {
                Err(Error::config("system frequency must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn lead_ticks(&self) -> usize {
        match self.lead {
            PlanningLead::Chunk => self.chunk,
            PlanningLead::Immediate => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Observed state before the action.
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Reward of the state reached by this action.
    pub reward: f64,
    pub plan_id: u64,
    /// Index of the observed state the producing plan started from.
    pub input_index: usize,
    /// Repeated previous action because the planner missed its deadline.
    pub held: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub chunk: usize,
    pub plans: u64,
    pub failed_plans: u64,
    pub deadline_misses: usize,
    /// Latency of every deadline-bound plan, in system ticks.
    pub latency_ticks: Vec<f64>,
}

impl TimingStats {
    /// `(min, mean, max)` latency in ticks.
    pub fn latency_summary(&self) -> Option<(f64, f64, f64)> {
        if self.latency_ticks.is_empty() {
            return None;
        }
        let min = self.latency_ticks.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.latency_ticks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.latency_ticks.iter().sum::<f64>() / self.latency_ticks.len() as f64;
        Some((min, mean, max))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub goal: Goal,
    pub steps: Vec<StepRecord>,
    pub final_state: Vec<f64>,
    pub success: bool,
    pub termination: Option<String>,
    pub timing: TimingStats,
}

impl EpisodeLog {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Every observed state, `len(steps) + 1` of them.
    pub fn states(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.state.clone())
            .chain(std::iter::once(self.final_state.clone()))
            .collect()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::tests::Linear;

    #[test]
    fn chunk_size_is_ceiling_of_ratio() {
        let f = |s, m| {
            compute_chunk_size(FrequencyPair {
                system_hz: s,
                mpc_hz: m,
            })
            .unwrap()
        };
        assert_eq!(f(25.0, 25.0), 1);
        assert_eq!(f(3.0, 1.2), 3);
        assert_eq!(f(25.0, 12.5), 2);
        assert_eq!(f(1.0, 10.0), 1);
        assert!(compute_chunk_size(FrequencyPair {
            system_hz: 0.0,
            mpc_hz: 1.0
        })
        .is_err());
        assert!(compute_chunk_size(FrequencyPair {
            system_hz: 1.0,
            mpc_hz: -1.0
        })
        .is_err());
    }

    #[test]
    fn future_state_composes_predictions() {
        let m = Linear {
            dim: 1,
            scale: 0.5,
            gain: 1.0,
        };
        let s = predict_future_state(&m, &[4.0], &[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(s, vec![2.5]);
        let one = predict_future_state(&m, &[4.0], &[vec![1.0]]).unwrap();
        assert_eq!(one, m.predict(&[4.0], &[1.0]).unwrap());
        let id = Linear {
            dim: 2,
            scale: 1.0,
            gain: 0.0,
        };
        assert_eq!(
            predict_future_state(&id, &[1.0, 2.0], &vec![vec![0.3, 0.1]; 3]).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn latency_sequence_repeats_last_entry() {
        let s = LatencySchedule::Sequence(vec![0.5, 3.0]);
        assert_eq!(s.latency(1), 0.5);
        assert_eq!(s.latency(2), 3.0);
        assert_eq!(s.latency(9), 3.0);
    }
}
