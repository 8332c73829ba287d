use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, GoalSchedule, RunConfig};
use crate::ensemble::EnsembleModel;
use crate::envs::{EnvSpec, Goal};
use crate::error::Result;
use crate::planner::Planner;
use crate::policy::{run_control_loop, EpisodeLog, LoopConfig, SimEnv};
use crate::rng;

/// Anything that can drive one evaluation episode.
pub trait Controller {
    fn run(&mut self, env: &EnvSpec, goal: &Goal, trial: u64) -> Result<EpisodeLog>;
}

/// Chunked MPC through a learned model; no model updates.
pub struct MpcController<'a> {
    pub model: &'a EnsembleModel,
    pub config: &'a RunConfig,
    pub loop_config: LoopConfig,
    /// Mixed into the planner seed so evaluation noise is independent of
    /// training.
    pub seed: u64,
}

impl<'a> MpcController<'a> {
    pub fn new(model: &'a EnsembleModel, config: &'a RunConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model,
            config,
            loop_config: config.timing.loop_config()?,
            seed,
        })
    }
}

impl Controller for MpcController<'_> {
    fn run(&mut self, env: &EnvSpec, goal: &Goal, trial: u64) -> Result<EpisodeLog> {
        let mut planner_config = self.config.planner_config(env);
        planner_config.seed = rng::derive(self.seed, rng::stream::EVAL, trial).random();
        let planner = Planner::new(planner_config)?;
        let mut sim = SimEnv::new(env.clone());
        let reward = |s: &[f64], _: &[f64]| env.reward(s, goal);
        run_control_loop(self.model, &planner, &mut sim, goal, &reward, &self.loop_config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub goal: u64,
    pub success: bool,
    #[serde(rename = "return")]
    pub total_return: f64,
    pub termination: Option<String>,
    pub deadline_misses: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalTally {
    pub trials: usize,
    pub successes: usize,
}

impl GoalTally {
    pub fn success_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

/// Success of one discrete goal, measured after `after_episode` training
/// episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalEvaluation {
    pub after_episode: usize,
    pub goal: u64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trials: Vec<TrialRecord>,
    pub success_rate: f64,
    pub mean_return: f64,
    pub per_goal: BTreeMap<u64, GoalTally>,
    /// Every previously trained goal of a sequential curriculum.
    pub retention: Vec<GoalEvaluation>,
}

/// Runs one episode per goal; trial `k` pursues `goals[k]`.
pub fn evaluate_controller<C: Controller + ?Sized>(
    controller: &mut C,
    env: &EnvSpec,
    goals: &[Goal],
) -> Result<EvalReport> {
    let mut trials = Vec::with_capacity(goals.len());
    let mut per_goal: BTreeMap<u64, GoalTally> = BTreeMap::new();
    for (k, goal) in goals.iter().enumerate() {
        let log = controller.run(env, goal, k as u64)?;
        let tally = per_goal.entry(goal.id).or_default();
        tally.trials += 1;
        tally.successes += usize::from(log.success);
        trials.push(TrialRecord {
            trial: k as u64,
            goal: goal.id,
            success: log.success,
            total_return: log.total_return(),
            termination: log.termination.clone(),
            deadline_misses: log.timing.deadline_misses,
        });
    }
    let n = trials.len().max(1) as f64;
    Ok(EvalReport {
        success_rate: trials.iter().filter(|t| t.success).count() as f64 / n,
        mean_return: trials.iter().map(|t| t.total_return).sum::<f64>() / n,
        trials,
        per_goal,
        retention: Vec::new(),
    })
}

/// `n` goals drawn from the environment's goal distribution.
pub fn random_goals(env: &EnvSpec, n: usize, seed: u64) -> Vec<Goal> {
    let mut r = rng::derive(seed, rng::stream::GOAL, u64::MAX);
    (0..n).map(|_| env.sample_goal(&mut r)).collect()
}

/// Evaluates one discrete goal for `trials` episodes.
pub fn evaluate_goal<C: Controller + ?Sized>(
    controller: &mut C,
    env: &EnvSpec,
    goal_index: usize,
    trials: usize,
    after_episode: usize,
) -> Result<GoalEvaluation> {
    let goal = env.goal_at(goal_index)?;
    let report = evaluate_controller(controller, env, &vec![goal.clone(); trials])?;
    let successes = report.trials.iter().filter(|t| t.success).count();
    Ok(GoalEvaluation {
        after_episode,
        goal: goal.id,
        trials,
        successes,
        success_rate: report.success_rate,
        mean_return: report.mean_return,
    })
}

/// `n` fresh random goals, plus every goal already trained for sequential
/// curricula.
pub fn evaluate(checkpoint: &Checkpoint, trials: usize, seed: u64) -> Result<EvalReport> {
    let env = checkpoint.config.env_spec()?;
    let mut controller = MpcController::new(&checkpoint.model, &checkpoint.config, seed)?;
    let mut report = evaluate_controller(&mut controller, &env, &random_goals(&env, trials, seed))?;
    if let GoalSchedule::Sequential { goals, .. } = &checkpoint.config.schedule {
        let reached = match checkpoint
            .config
            .schedule
            .block(checkpoint.episodes_done.saturating_sub(1))
        {
            Some(b) if checkpoint.episodes_done > 0 => b + 1,
            _ => 0,
        };
        for &g in goals.iter().take(reached.min(goals.len())) {
            report.retention.push(evaluate_goal(
                &mut controller,
                &env,
                g,
                trials,
                checkpoint.episodes_done,
            )?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::run_feedback;

    /// Saturated PD law on the true double-integrator state.
    struct Oracle;

    impl Controller for Oracle {
        fn run(&mut self, env: &EnvSpec, goal: &Goal, _: u64) -> Result<EpisodeLog> {
            let target = goal.position.clone().unwrap();
            let mut sim = SimEnv::new(env.clone());
            run_feedback(&mut sim, goal, |_, s| {
                (0..2)
                    .map(|d| (25.0 * (target[d] - s[d]) - 8.0 * s[d + 2]).clamp(-1.0, 1.0))
                    .collect()
            })
        }
    }

    #[test]
    fn oracle_reaches_every_point_mass_goal() {
        let env = EnvSpec::point_mass_reach();
        let goals = random_goals(&env, 20, 3);
        let report = evaluate_controller(&mut Oracle, &env, &goals).unwrap();
        assert_eq!(report.trials.len(), 20);
        assert_eq!(report.success_rate, 1.0);
        assert_eq!(report.per_goal.values().map(|t| t.trials).sum::<usize>(), 20);
    }

    #[test]
    fn random_goals_are_seeded() {
        let env = EnvSpec::point_mass_reach();
        assert_eq!(random_goals(&env, 5, 1), random_goals(&env, 5, 1));
        assert_ne!(random_goals(&env, 5, 1), random_goals(&env, 5, 2));
    }
}
