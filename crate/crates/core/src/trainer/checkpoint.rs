use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GoalEvaluation, RunConfig};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gcpmpc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete resumable training state. Every random stream is derived from
/// `config.seed` and a counter held here, so no generator state is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub model: EnsembleModel,
    pub dataset: Dataset,
    /// Training episodes completed.
    pub episodes_done: usize,
    /// Curriculum evaluations recorded so far.
    pub evaluations: Vec<GoalEvaluation>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

impl Checkpoint {
    pub fn new(config: RunConfig, model: EnsembleModel, dataset: Dataset, episodes_done: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            model,
            dataset,
            episodes_done,
            evaluations: Vec::new(),
        }
    }
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(checkpoint)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let header: Header = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: not a checkpoint ({e})", path.display())))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let checkpoint: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
    checkpoint.config.validate()?;
    let env = checkpoint.config.env_spec()?;
    if checkpoint.model.state_dim() != env.state_dim() || checkpoint.model.action_dim() != env.action_dim() {
        return Err(Error::Checkpoint(
            "model dimensions do not match the environment".into(),
        ));
    }
    Ok(checkpoint)
}
