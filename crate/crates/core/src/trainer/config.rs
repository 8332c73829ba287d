use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleConfig, TrainSchedule};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::policy::{compute_chunk_size, Clock, FrequencyPair, LatencySchedule, LoopConfig, PlanningLead};

/// Which goal each training episode pursues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GoalSchedule {
    /// A fresh goal drawn from the environment's goal distribution every
    /// episode.
    Random { episodes: usize },
    /// Indices into the environment's discrete goal set, trained in order
    /// for `episodes_per_goal` episodes each.
    Sequential {
        goals: Vec<usize>,
        episodes_per_goal: usize,
    },
}

impl Default for GoalSchedule {
    fn default() -> Self {
        GoalSchedule::Random { episodes: 100 }
    }
}

impl GoalSchedule {
    pub fn total_episodes(&self) -> usize {
        match self {
            GoalSchedule::Random { episodes } => *episodes,
            GoalSchedule::Sequential {
                goals,
                episodes_per_goal,
            } => goals.len() * episodes_per_goal,
        }
    }

    /// Position in `goals` trained during `episode`, for sequential schedules.
    pub fn block(&self, episode: usize) -> Option<usize> {
        match self {
            GoalSchedule::Random { .. } => None,
            GoalSchedule::Sequential { episodes_per_goal, .. } => Some(episode / episodes_per_goal.max(&1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Plant and planner rates; ignored when `chunk` is set.
    pub frequencies: FrequencyPair,
    pub chunk: Option<usize>,
    pub lead: PlanningLead,
    /// Scripted planner latency in ticks (virtual clock).
    pub latency_ticks: f64,
    /// Run episodes on real threads at `frequencies.system_hz`.
    pub wall_clock: bool,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            frequencies: FrequencyPair {
                system_hz: 25.0,
                mpc_hz: 12.5,
            },
            chunk: None,
            lead: PlanningLead::Chunk,
            latency_ticks: 1.0,
            wall_clock: false,
        }
    }
}

impl TimingConfig {
    pub fn chunk_size(&self) -> Result<usize> {
        match self.chunk {
            Some(0) => Err(Error::config("chunk size must be at least 1")),
            Some(x) => Ok(x),
            None => compute_chunk_size(self.frequencies),
        }
    }

    pub fn loop_config(&self) -> Result<LoopConfig> {
        let clock = if self.wall_clock {
            Clock::WallClock {
                system_hz: self.frequencies.system_hz,
            }
        } else {
            Clock::Virtual(LatencySchedule::Constant(self.latency_ticks))
        };
        let config = LoopConfig {
            chunk: self.chunk_size()?,
            lead: self.lead,
            clock,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Everything a training run needs. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: GoalSchedule,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub timing: TimingConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Trials per goal in the evaluations run after each curriculum block.
    #[serde(default = "default_eval_trials")]
    pub eval_trials: usize,
}

fn default_warmup() -> usize {
    5000
}

fn default_checkpoint_every() -> usize {
    10
}

fn default_eval_trials() -> usize {
    20
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::preset(&self.env)
    }

    /// Planner settings; action bounds always come from the environment.
    pub fn planner_config(&self, env: &EnvSpec) -> PlannerConfig {
        PlannerConfig {
            action_low: env.action_low.clone(),
            action_high: env.action_high.clone(),
            ..self.planner.clone()
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.env))
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        self.ensemble.validate()?;
        self.planner_config(&env).validate()?;
        self.timing.loop_config()?;
        if self.warmup_steps < 3 {
            return Err(Error::config("warm-up needs at least three samples"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if let GoalSchedule::Sequential {
            goals,
            episodes_per_goal,
        } = &self.schedule
        {
            if goals.is_empty() || *episodes_per_goal == 0 {
                return Err(Error::config("sequential schedule needs goals and episodes"));
            }
            for &g in goals {
                env.goal_at(g)?;
            }
        }
        Ok(())
    }

    /// Small settings for the toy environments that train in minutes on
    /// one core.
    pub fn preset(env: &str, seed: u64) -> Result<Self> {
        let spec = EnvSpec::preset(env)?;
        let schedule = match spec.discrete_goal_count() {
            Some(n) if env == "free_rotor" => GoalSchedule::Sequential {
                goals: (0..n).collect(),
                episodes_per_goal: 100,
            },
            _ => GoalSchedule::Random { episodes: 100 },
        };
        let config = Self {
            seed,
            env: env.to_string(),
            output_dir: None,
            warmup_steps: 1000,
            schedule,
            ensemble: EnsembleConfig {
                members: 5,
                particles: 1,
                hidden: vec![32, 32, 32],
                predict_delta: true,
                schedule: TrainSchedule {
                    epochs: 5,
                    batch_size: 64,
                    patience: 2,
                    max_batches: Some(100),
                },
                ..EnsembleConfig::default()
            },
            planner: PlannerConfig {
                horizon: 12,
                population: 64,
                elites: 8,
                iterations: 3,
                action_low: spec.action_low.clone(),
                action_high: spec.action_high.clone(),
                seed,
                ..PlannerConfig::default()
            },
            timing: TimingConfig::default(),
            checkpoint_every: 10,
            eval_trials: 5,
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_fills_defaults() {
        let c = RunConfig::from_toml("seed = 3\nenv = \"point_mass_reach\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.warmup_steps, 5000);
        assert_eq!(c.ensemble.members, 5);
        assert_eq!(c.planner.horizon, 50);
        assert_eq!(c.timing.chunk_size().unwrap(), 2);
        assert_eq!(c.schedule.total_episodes(), 100);
    }

    #[test]
    fn seed_is_mandatory_and_ids_resolve() {
        assert!(RunConfig::from_toml("env = \"point_mass_reach\"\n").is_err());
        assert!(RunConfig::from_toml("seed = 1\nenv = \"nope\"\n").is_err());
        let bad_goal = "seed = 1\nenv = \"free_rotor\"\n[schedule]\ntype = \"sequential\"\ngoals = [0, 7]\nepisodes_per_goal = 2\n";
        assert!(RunConfig::from_toml(bad_goal).is_err());
        assert!(RunConfig::from_toml("seed = 1\nenv = \"point_mass_reach\"\nbogus = 2\n").is_err());
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for env in ["point_mass_reach", "two_link_arm", "free_rotor"] {
            let c = RunConfig::preset(env, 9).unwrap();
            let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn sequential_blocks() {
        let s = GoalSchedule::Sequential {
            goals: vec![0, 1, 2],
            episodes_per_goal: 100,
        };
        assert_eq!(s.total_episodes(), 300);
        assert_eq!(s.block(99), Some(0));
        assert_eq!(s.block(100), Some(1));
        assert_eq!(s.block(200), Some(2));
    }
}
