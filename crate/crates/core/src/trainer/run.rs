use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::dataset::{episode_transitions, warmup_collect, Dataset};
use super::eval::{evaluate_goal, GoalEvaluation, MpcController};
use super::{GoalSchedule, RunConfig};
use crate::ensemble::{EnsembleModel, TrainReport, Transition};
use crate::envs::{EnvSpec, Goal};
use crate::error::{Error, Result};
use crate::planner::{Dynamics, Planner};
use crate::policy::{run_control_loop, EpisodeLog, LoopConfig, SimEnv};
use crate::rng;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

/// One control episode through `model`, returning its log and the
/// transitions it produced. An environment fault truncates the log; the
/// transitions recorded up to the fault are kept.
pub fn run_episode<D: Dynamics + ?Sized>(
    model: &D,
    planner: &Planner,
    env: &EnvSpec,
    goal: &Goal,
    loop_config: &LoopConfig,
    episode: u64,
) -> Result<(EpisodeLog, Vec<Transition>)> {
    let mut sim = SimEnv::new(env.clone());
    let reward = |s: &[f64], _: &[f64]| env.reward(s, goal);
    let log = run_control_loop(model, planner, &mut sim, goal, &reward, loop_config)?;
    let transitions = episode_transitions(&log, episode);
    Ok((log, transitions))
}

/// One line of `metrics.jsonl`. Nothing here depends on wall time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Warmup {
        steps: usize,
        transitions: usize,
        train_loss: f64,
    },
    Episode {
        episode: usize,
        goal: u64,
        #[serde(rename = "return")]
        total_return: f64,
        success: bool,
        termination: Option<String>,
        steps: usize,
        dataset_size: usize,
        train_loss: f64,
        deadline_misses: usize,
        plans: u64,
        failed_plans: u64,
    },
    Evaluation(GoalEvaluation),
}

impl MetricsRecord {
    /// Episodes completed when this record was written.
    fn episodes_done(&self) -> usize {
        match self {
            MetricsRecord::Warmup { .. } => 0,
            MetricsRecord::Episode { episode, .. } => episode + 1,
            MetricsRecord::Evaluation(e) => e.after_episode,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TimingRecord {
    episode: Option<usize>,
    episode_secs: f64,
    update_secs: f64,
    latency_ticks_mean: Option<f64>,
    latency_ticks_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub dataset_size: usize,
    pub model_updates: u64,
    pub first_returns_mean: f64,
    pub last_returns_mean: f64,
    pub success_rate_last_10: f64,
    pub evaluations: Vec<GoalEvaluation>,
}

/// Paths of a run's artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join(TIMING_FILE)
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join(SUMMARY_FILE)
    }

    pub fn episodes(&self) -> PathBuf {
        self.root.join(EPISODES_FILE)
    }
}

fn append_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

/// Metrics already on disk, cut back to the checkpointed progress.
fn read_metrics(path: &Path, episodes_done: usize) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line)?;
        if record.episodes_done() <= episodes_done {
            out.push(record);
        }
    }
    Ok(out)
}

fn rewrite_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        buf.extend(serde_json::to_vec(r)?);
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

fn mean_loss(report: &TrainReport) -> f64 {
    let n = report.members.len().max(1) as f64;
    report.members.iter().map(|m| m.last.total).sum::<f64>() / n
}

fn episode_goal(config: &RunConfig, env: &EnvSpec, episode: usize) -> Result<Goal> {
    match &config.schedule {
        GoalSchedule::Random { .. } => {
            Ok(env.sample_goal(&mut rng::derive(config.seed, rng::stream::GOAL, episode as u64)))
        }
        GoalSchedule::Sequential {
            goals,
            episodes_per_goal,
        } => env.goal_at(goals[episode / episodes_per_goal]),
    }
}

/// Seed for the planner of training episode `episode`.
fn episode_planner_seed(seed: u64, episode: usize) -> u64 {
    rng::derive(seed, rng::stream::PLAN, u64::MAX - episode as u64).random()
}

/// Fresh start: warm-up data and the first model fit.
fn initialise(config: &RunConfig, env: &EnvSpec, dir: &RunDir) -> Result<Checkpoint> {
    let started = Instant::now();
    let mut warm_rng = rng::derive(config.seed, rng::stream::WARMUP, 0);
    let dataset = warmup_collect(env, config.warmup_steps, &mut warm_rng, 0)?;
    let mut model = EnsembleModel::new(config.ensemble.clone(), env.state_dim(), env.action_dim(), config.seed)?;
    let report = model.update(dataset.transitions())?;
    for path in [dir.metrics(), dir.timing(), dir.episodes()] {
        if path.exists() {
            fs::remove_file(&path)?;
        }
    }
    append_json(
        &dir.metrics(),
        &MetricsRecord::Warmup {
            steps: dataset.steps(),
            transitions: dataset.len(),
            train_loss: mean_loss(&report),
        },
    )?;
    append_json(
        &dir.timing(),
        &TimingRecord {
            episode: None,
            episode_secs: 0.0,
            update_secs: started.elapsed().as_secs_f64(),
            latency_ticks_mean: None,
            latency_ticks_max: None,
        },
    )?;
    Ok(Checkpoint::new(config.clone(), model, dataset, 0))
}

/// Options that do not change what a run computes.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many episodes in total (the run stays resumable).
    pub stop_after: Option<usize>,
    /// Also append every episode log to `episodes.jsonl`.
    pub episode_logs: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Runs (or resumes) a training run in `config.output_dir()`.
///
/// A checkpoint in the directory is resumed if its configuration matches
/// `config`; otherwise the run starts from warm-up.
pub fn train(config: &RunConfig, options: &TrainOptions) -> Result<RunSummary> {
    train_in(config, &RunDir::new(config.output_dir()), options)
}

pub fn train_in(config: &RunConfig, dir: &RunDir, options: &TrainOptions) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(&dir.root)?;
    let env = config.env_spec()?;
    let loop_config = config.timing.loop_config()?;
    let total = config.schedule.total_episodes();

    let mut state = match dir.checkpoint().exists() {
        true => {
            let c = load_checkpoint(&dir.checkpoint())?;
            if c.config != *config {
                return Err(Error::config(format!(
                    "{} belongs to a different configuration",
                    dir.checkpoint().display()
                )));
            }
            let kept = read_metrics(&dir.metrics(), c.episodes_done)?;
            rewrite_jsonl(&dir.metrics(), &kept)?;
            c
        }
        false => {
            let c = initialise(config, &env, dir)?;
            save_checkpoint(&dir.checkpoint(), &c)?;
            c
        }
    };

    let stop = options.stop_after.unwrap_or(total).min(total);
    while state.episodes_done < stop {
        let episode = state.episodes_done;
        let goal = episode_goal(config, &env, episode)?;
        let mut planner_config = config.planner_config(&env);
        planner_config.seed = episode_planner_seed(config.seed, episode);
        let planner = Planner::new(planner_config)?;

        let started = Instant::now();
        let (log, transitions) = run_episode(&state.model, &planner, &env, &goal, &loop_config, episode as u64)?;
        let episode_secs = started.elapsed().as_secs_f64();
        state.dataset.append_episode(log.steps.len(), transitions)?;

        let started = Instant::now();
        // On a training fault the model rolls back and the last checkpoint
        // on disk stays the resume point.
        let report = state.model.update(state.dataset.transitions())?;
        let update_secs = started.elapsed().as_secs_f64();
        state.episodes_done += 1;

        let record = MetricsRecord::Episode {
            episode,
            goal: goal.id,
            total_return: log.total_return(),
            success: log.success,
            termination: log.termination.clone(),
            steps: log.steps.len(),
            dataset_size: state.dataset.len(),
            train_loss: mean_loss(&report),
            deadline_misses: log.timing.deadline_misses,
            plans: log.timing.plans,
            failed_plans: log.timing.failed_plans,
        };
        if options.verbose {
            eprintln!(
                "episode {episode:>4} goal {} return {:>9.3} success {}",
                goal.id,
                log.total_return(),
                log.success
            );
        }
        append_json(&dir.metrics(), &record)?;
        let summary = log.timing.latency_summary();
        append_json(
            &dir.timing(),
            &TimingRecord {
                episode: Some(episode),
                episode_secs,
                update_secs,
                latency_ticks_mean: summary.map(|s| s.1),
                latency_ticks_max: summary.map(|s| s.2),
            },
        )?;
        if options.episode_logs {
            append_json(&dir.episodes(), &log)?;
        }

        // End of a curriculum block: measure every goal trained so far.
        if let GoalSchedule::Sequential {
            goals,
            episodes_per_goal,
        } = &config.schedule
        {
            if state.episodes_done % episodes_per_goal == 0 && config.eval_trials > 0 {
                let block = state.episodes_done / episodes_per_goal;
                let mut controller =
                    MpcController::new(&state.model, config, config.seed ^ state.episodes_done as u64)?;
                for &g in &goals[..block] {
                    let e = evaluate_goal(&mut controller, &env, g, config.eval_trials, state.episodes_done)?;
                    if options.verbose {
                        eprintln!("  eval goal {} success {:.2}", e.goal, e.success_rate);
                    }
                    append_json(&dir.metrics(), &MetricsRecord::Evaluation(e.clone()))?;
                    state.evaluations.push(e);
                }
            }
        }

        if state.episodes_done % config.checkpoint_every == 0 || state.episodes_done == stop {
            save_checkpoint(&dir.checkpoint(), &state)?;
        }
    }

    let summary = summarise(config, &state, &read_metrics(&dir.metrics(), state.episodes_done)?);
    fs::write(dir.summary(), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

fn summarise(config: &RunConfig, state: &Checkpoint, metrics: &[MetricsRecord]) -> RunSummary {
    let episodes: Vec<(f64, bool)> = metrics
        .iter()
        .filter_map(|m| match m {
            MetricsRecord::Episode {
                total_return, success, ..
            } => Some((*total_return, *success)),
            _ => None,
        })
        .collect();
    let mean = |xs: &[(f64, bool)]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|x| x.0).sum::<f64>() / xs.len() as f64
        }
    };
    let k = episodes.len().min(10);
    let last = &episodes[episodes.len() - k..];
    RunSummary {
        env: config.env.clone(),
        seed: config.seed,
        episodes: state.episodes_done,
        dataset_size: state.dataset.len(),
        model_updates: state.model.updates(),
        first_returns_mean: mean(&episodes[..k]),
        last_returns_mean: mean(last),
        success_rate_last_10: if k == 0 {
            0.0
        } else {
            last.iter().filter(|x| x.1).count() as f64 / k as f64
        },
        evaluations: state.evaluations.clone(),
    }
}

/// Continues a run from the checkpoint in `dir`.
pub fn resume(dir: &RunDir, options: &TrainOptions) -> Result<RunSummary> {
    let checkpoint = load_checkpoint(&dir.checkpoint())?;
    train_in(&checkpoint.config, dir, options)
}

/// Metrics records of a finished or partial run.
pub fn load_metrics(dir: &RunDir) -> Result<Vec<MetricsRecord>> {
    read_metrics(&dir.metrics(), usize::MAX)
}

/// Random-action data only, for the `collect` verb.
pub fn collect(config: &RunConfig, steps: usize) -> Result<Dataset> {
    let env = config.env_spec()?;
    warmup_collect(&env, steps, &mut rng::derive(config.seed, rng::stream::WARMUP, 0), 0)
}
