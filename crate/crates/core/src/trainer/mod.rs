//! The learning loop: random warm-up, per-episode model updates, goal
//! schedules, evaluation and persistence.

mod checkpoint;
mod config;
mod dataset;
mod eval;
mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{GoalSchedule, RunConfig, TimingConfig};
pub use dataset::{episode_transitions, warmup_collect, Dataset};
pub use eval::{
    evaluate, evaluate_controller, evaluate_goal, random_goals, Controller, EvalReport, GoalEvaluation, GoalTally,
    MpcController, TrialRecord,
};
pub use run::{
    collect, load_metrics, resume, run_episode, train, train_in, MetricsRecord, RunDir, RunSummary, TrainOptions,
    CHECKPOINT_FILE, EPISODES_FILE, METRICS_FILE, SUMMARY_FILE, TIMING_FILE,
};
