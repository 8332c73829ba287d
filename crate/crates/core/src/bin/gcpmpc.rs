use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gcpmpc::trainer::{self, load_checkpoint, RunConfig, RunDir, TrainOptions};
use gcpmpc::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_TRAINING_FAULT: u8 = 3;
const EXIT_OTHER: u8 = 1;

#[derive(Parser)]
#[command(
    name = "gcpmpc",
    version,
    about = "Goal-conditioned probabilistic MPC with learned ensembles"
)]
struct Cli {
    /// Overrides the output directory of `train` and `collect`.
    #[arg(long, global = true, env = "GCPMPC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) from a TOML run configuration.
    Train {
        config: PathBuf,
        /// Stop after this many episodes; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Also store full episode logs.
        #[arg(long)]
        episode_logs: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on fresh random goals.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect random-action transitions into a dataset file.
    Collect {
        config: PathBuf,
        #[arg(long)]
        steps: usize,
    },
    /// Print a checkpoint's configuration and progress.
    Inspect { checkpoint: PathBuf },
    /// Print the built-in configuration for a toy environment.
    Preset {
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path, output_dir: &Option<PathBuf>) -> gcpmpc::Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if output_dir.is_some() {
        config.output_dir = output_dir.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> gcpmpc::Result<()> {
    match cli.command {
        Command::Train {
            config,
            stop_after,
            episode_logs,
            quiet,
        } => {
            let config = load_config(&config, &cli.output_dir)?;
            let options = TrainOptions {
                stop_after,
                episode_logs,
                verbose: !quiet,
            };
            let summary = trainer::train(&config, &options)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Evaluate {
            checkpoint,
            trials,
            seed,
        } => {
            let checkpoint = load_checkpoint(&checkpoint)?;
            let report = trainer::evaluate(&checkpoint, trials, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Collect { config, steps } => {
            let config = load_config(&config, &cli.output_dir)?;
            let data = trainer::collect(&config, steps)?;
            let dir = config.output_dir();
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("dataset.json");
            std::fs::write(&path, serde_json::to_vec(&data)?)?;
            println!(
                "{} steps, {} transitions -> {}",
                data.steps(),
                data.len(),
                path.display()
            );
        }
        Command::Inspect { checkpoint } => {
            let c = load_checkpoint(&checkpoint)?;
            println!("format      {} v{}", c.format, c.version);
            println!("env         {}", c.config.env);
            println!("seed        {}", c.config.seed);
            println!(
                "episodes    {} / {}",
                c.episodes_done,
                c.config.schedule.total_episodes()
            );
            println!("updates     {}", c.model.updates());
            println!(
                "dataset     {} transitions from {} steps",
                c.dataset.len(),
                c.dataset.steps()
            );
            println!(
                "members     {} x {} particles",
                c.model.members().len(),
                c.config.ensemble.particles
            );
            for e in &c.evaluations {
                println!(
                    "eval        after {:>4} goal {} success {:.2}",
                    e.after_episode, e.goal, e.success_rate
                );
            }
            let dir = RunDir::new(checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            if dir.metrics().exists() {
                println!("metrics     {}", dir.metrics().display());
            }
        }
        Command::Preset { env, seed } => {
            print!("{}", RunConfig::preset(&env, seed)?.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::TrainingFault { .. } => EXIT_TRAINING_FAULT,
                _ => EXIT_OTHER,
            })
        }
    }
}
