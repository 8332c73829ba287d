use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{two_step_loss, two_step_loss_and_grad};
use super::{EnsembleModel, LossBreakdown, NormalizerStats, Transition, TwoStepBatch};
use crate::error::{Error, Result};
use crate::nn::{sample_dropout_masks, DropoutMask};
use crate::rng;

/// Mini-batch schedule for one model update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without improvement of the epoch loss.
    pub patience: usize,
    /// Upper bound on gradient steps per member and update.
    pub max_batches: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            patience: 5,
            max_batches: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("epochs, batch size and patience must be positive"));
        }
        if self.max_batches == Some(0) {
            return Err(Error::config("max_batches must be positive when set"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    /// Loss of the mean network on the evaluation rows before training.
    pub initial: LossBreakdown,
    /// Same rows after training.
    pub last: LossBreakdown,
    pub epochs: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub members: Vec<MemberReport>,
    pub dataset_size: usize,
    pub epochs_run: usize,
    pub wall_time_secs: f64,
}

impl PartialEq for TrainReport {
    /// Wall time is excluded; everything else is a deterministic function of
    /// the model, dataset and seed.
    fn eq(&self, other: &Self) -> bool {
        self.members == other.members && self.dataset_size == other.dataset_size && self.epochs_run == other.epochs_run
    }
}

const EVAL_ROWS: usize = 1024;

fn eval_rows(n: usize) -> Vec<usize> {
    if n <= EVAL_ROWS {
        (0..n).collect()
    } else {
        (0..EVAL_ROWS).map(|i| i * n / EVAL_ROWS).collect()
    }
}

impl EnsembleModel {
    /// Refits the normaliser on the whole dataset, trains every member on
    /// shuffled mini-batches with fresh per-sample training masks, then
    /// resamples the inference particles.
    ///
    /// On a training fault the model is left exactly as it was.
    pub fn update(&mut self, dataset: &[Transition]) -> Result<TrainReport> {
        let backup = self.clone();
        match self.update_inner(dataset) {
            Ok(report) => Ok(report),
            Err(e) => {
                *self = backup;
                Err(e)
            }
        }
    }

    fn update_inner(&mut self, dataset: &[Transition]) -> Result<TrainReport> {
        let start = Instant::now();
        let stats = NormalizerStats::fit(dataset)?;
        self.set_normalizer(stats)?;
        let data = TwoStepBatch::from_transitions(dataset, self.normalizer())?;
        let eval = data.select(&eval_rows(data.len()));

        let config = self.config.clone();
        let params = config.loss_params();
        let schedule = &config.schedule;
        let plain = vec![DropoutMask::ones(&config.hidden, 1.0)?];
        let seed = self.seed();
        let update_idx = self.updates();

        let (members, optimizers) = self.parts_mut();
        let mut reports = Vec::with_capacity(members.len());
        let mut epochs_run = 0;
        for (b, (net, opt)) in members.iter_mut().zip(optimizers.iter_mut()).enumerate() {
            let mut r = rng::derive(seed, rng::stream::TRAIN, update_idx * 1024 + b as u64);
            let initial = two_step_loss(net, &eval, &plain, &params)?;
            let mut order: Vec<usize> = (0..data.len()).collect();
            let mut best = f64::INFINITY;
            let mut stale = 0;
            let mut batches = 0;
            let mut epochs = 0;
            'epochs: for _ in 0..schedule.epochs {
                order.shuffle(&mut r);
                epochs += 1;
                let mut epoch_loss = 0.0;
                let mut epoch_batches = 0;
                for rows in order.chunks(schedule.batch_size) {
                    let batch = data.select(rows);
                    let masks = sample_dropout_masks(&mut r, &config.hidden, config.keep_prob, rows.len())?;
                    let (loss, grads) = two_step_loss_and_grad(net, &batch, &masks, &params)?;
                    opt.step(net, &grads)?;
                    epoch_loss += loss.total;
                    epoch_batches += 1;
                    batches += 1;
                    if schedule.max_batches.is_some_and(|m| batches >= m) {
                        break 'epochs;
                    }
                }
                let mean = epoch_loss / epoch_batches as f64;
                if mean < best {
                    best = mean;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= schedule.patience {
                        break;
                    }
                }
            }
            net.validate()?;
            let last = two_step_loss(net, &eval, &plain, &params)?;
            epochs_run = epochs_run.max(epochs);
            reports.push(MemberReport {
                initial,
                last,
                epochs,
                batches,
            });
        }

        self.resample_inference_masks()?;
        self.bump_updates();
        Ok(TrainReport {
            members: reports,
            dataset_size: dataset.len(),
            epochs_run,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}
