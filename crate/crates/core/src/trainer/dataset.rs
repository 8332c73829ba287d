use serde::{Deserialize, Serialize};

use crate::ensemble::Transition;
use crate::envs::{EnvSpec, Goal, Thresholds};
use crate::error::{Error, Result};
use crate::policy::{run_feedback, EpisodeLog, SimEnv};
use crate::rng::Rng;

/// Append-only store of two-step transitions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    transitions: Vec<Transition>,
    /// Environment steps that produced the transitions.
    steps: usize,
    episodes: usize,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    /// Adds one episode's worth of transitions.
    pub fn append_episode(&mut self, steps: usize, transitions: Vec<Transition>) -> Result<()> {
        if let Some(first) = transitions.first() {
            if transitions.iter().any(|t| t.episode != first.episode) {
                return Err(Error::config("transitions of one episode must share its index"));
            }
        }
        self.steps += steps;
        self.episodes += 1;
        self.transitions.extend(transitions);
        Ok(())
    }
}

/// Sliding two-step windows over the recorded `(s_t, a_t)` samples of one
/// episode: `k` samples give `k − 2` transitions.
pub fn episode_transitions(log: &EpisodeLog, episode: u64) -> Vec<Transition> {
    log.steps
        .windows(3)
        .map(|w| {
            Transition::new(
                w[0].state.clone(),
                w[0].action.clone(),
                w[1].state.clone(),
                w[1].action.clone(),
                w[2].state.clone(),
                episode,
                log.goal.id,
            )
        })
        .collect()
}

fn no_goal() -> Goal {
    Goal {
        id: 0,
        position: None,
        orientation: None,
        thresholds: Thresholds::default(),
    }
}

/// Uniform random bounded actions until `samples` steps are collected.
/// Episodes are numbered from `first_episode`.
pub fn warmup_collect(env: &EnvSpec, samples: usize, rng: &mut Rng, first_episode: u64) -> Result<Dataset> {
    if samples < 3 {
        return Err(Error::config("warm-up needs at least three samples"));
    }
    env.validate()?;
    let mut data = Dataset::new();
    let goal = no_goal();
    let mut episode = first_episode;
    while data.steps() < samples {
        let mut spec = env.clone();
        spec.episode_len = spec.episode_len.min(samples - data.steps());
        let mut sim = SimEnv::new(spec);
        let log = run_feedback(&mut sim, &goal, |_, _| env.random_action(rng))?;
        if log.steps.is_empty() {
            return Err(Error::Environment("warm-up episode produced no steps".into()));
        }
        let transitions = episode_transitions(&log, episode);
        data.append_episode(log.steps.len(), transitions)?;
        episode += 1;
    }
    Ok(data)
}
