//! Mini-batch Adam training under a difficulty schedule, with validation
//! after every epoch and early stopping on a selection metric.

mod adam;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::Adam;

use crate::corpus::ListPair;
use crate::inference::{evaluate_pairs, DecodeMode, MetricReport};
use crate::masker::{build_token_bundle, MaskPolicy, TokenBundle};
use crate::model::Model;
use crate::scheduler::{DifficultySchedule, ScheduleKind};
use crate::{Error, Result};

/// Salt separating dropout streams from masking streams.
const DROPOUT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[serde(rename = "ndcg@10")]
    Ndcg10,
    #[serde(rename = "hr@10")]
    Hr10,
    #[serde(rename = "loss")]
    Loss,
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::Ndcg10 => "ndcg@10",
            SelectionMetric::Hr10 => "hr@10",
            SelectionMetric::Loss => "loss",
        })
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndcg@10" => Ok(SelectionMetric::Ndcg10),
            "hr@10" => Ok(SelectionMetric::Hr10),
            "loss" => Ok(SelectionMetric::Loss),
            other => Err(Error::invalid(format!("unknown selection metric `{other}`"))),
        }
    }
}

impl SelectionMetric {
    fn higher_is_better(self) -> bool {
        !matches!(self, SelectionMetric::Loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub schedule: ScheduleKind,
    /// Curriculum steps for the step-wise schedule.
    pub steps: usize,
    pub metric: SelectionMetric,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Input-side masking; `rho_t` is taken from the schedule.
    pub masking: MaskPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 256,
            max_epochs: 200,
            patience: 3,
            schedule: ScheduleKind::Stepwise,
            steps: 5,
            metric: SelectionMetric::Ndcg10,
            clip_norm: Some(5.0),
            masking: MaskPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("patience, batch_size and max_epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        self.masking.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<DifficultySchedule> {
        let steps = match self.schedule {
            ScheduleKind::Naive => 1,
            ScheduleKind::Stepwise => self.steps,
        };
        DifficultySchedule::new(self.schedule, self.max_epochs, steps)
    }
}

/// One line of the training log. `epoch` counts from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rho_t: f64,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub model: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochLog>,
}

/// Writes the log as one JSON object per line.
pub fn write_log<W: Write>(log: &[EpochLog], mut out: W) -> std::io::Result<()> {
    for entry in log {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Deterministic bundles for epoch `epoch`: a seeded shuffle of the
/// training pairs, each masked with its own stream.
pub fn epoch_bundles(
    pairs: &[ListPair],
    model: &Model,
    policy: &MaskPolicy,
    epoch: usize,
    seed: u64,
) -> Result<Vec<TokenBundle>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut crate::stream_rng(seed, (epoch as u64) << 32 | 0xffff_ffff));
    order
        .into_iter()
        .map(|i| {
            let mut rng = crate::stream_rng(seed, (epoch as u64) << 32 | i as u64);
            build_token_bundle(&pairs[i], model.vocab(), policy, model.config().max_len, &mut rng)
        })
        .collect()
}

/// Metric on the validation pairs at full difficulty with no input masking.
pub fn validation_metric(model: &Model, pairs: &[ListPair], metric: SelectionMetric) -> Result<f64> {
    match metric {
        SelectionMetric::Loss => {
            let policy = MaskPolicy::evaluation();
            let mut rng = crate::seeded_rng(0);
            let bundles = pairs
                .iter()
                .map(|p| build_token_bundle(p, model.vocab(), &policy, model.config().max_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(model.loss(&bundles)?.total)
        }
        SelectionMetric::Ndcg10 => Ok(evaluate(model, pairs)?.ndcg_at_10),
        SelectionMetric::Hr10 => Ok(evaluate(model, pairs)?.hr_at_10),
    }
}

/// NAR generation of `|y|` items per pair, scored at k = 5 and 10.
pub fn evaluate(model: &Model, pairs: &[ListPair]) -> Result<MetricReport> {
    evaluate_pairs(model, pairs, DecodeMode::Nar)
}

/// Early-stopping bookkeeping: tracks the best value and how many epochs
/// have passed without improving on it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn record(&mut self, epoch: usize, value: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((_, b)) if self.higher_is_better => value > b,
            Some((_, b)) => value < b,
        };
        if better {
            self.best = Some((epoch, value));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Trains `model` in place and returns the best checkpoint by validation.
/// Batches for the next epoch are built on a worker thread while the
/// current epoch's optimizer steps run.
pub fn train(
    mut model: Model,
    train_pairs: &[ListPair],
    valid_pairs: &[ListPair],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() || valid_pairs.is_empty() {
        return Err(Error::invalid("training needs nonempty train and validation splits"));
    }
    let schedule = config.schedule()?;
    let mut adam = Adam::new(config.learning_rate, &model.params);
    let mut stopper = EarlyStopping::new(config.patience, config.metric.higher_is_better());
    let mut best_params = model.params.clone();
    let mut log = Vec::new();
    let vocab_model = model.clone();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<TokenBundle>>>(1);
        let producer_model = &vocab_model;
        let schedule = &schedule;
        scope.spawn(move || {
            for epoch in 0..config.max_epochs {
                let policy = config.masking.with_rho_t(schedule.at(epoch));
                let built = epoch_bundles(train_pairs, producer_model, &policy, epoch, config.seed);
                if tx.send(built).is_err() {
                    break;
                }
            }
        });

        for epoch in 0..config.max_epochs {
            let start = Instant::now();
            let bundles = rx
                .recv()
                .map_err(|_| Error::invalid("batch producer stopped early"))??;
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for (b, chunk) in bundles.chunks(config.batch_size).enumerate() {
                if chunk.iter().all(|x| x.labels.is_empty()) {
                    continue;
                }
                let mut dropout =
                    crate::stream_rng(config.seed ^ DROPOUT_SALT, (epoch as u64) << 32 | b as u64);
                let forward = model.forward_batch(chunk, Some(&mut dropout))?;
                let loss = forward.loss.total;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                let mut grads = forward.backward();
                if let Some(limit) = config.clip_norm {
                    let norm = grads.global_norm();
                    if norm > limit {
                        grads.scale(limit / norm);
                    }
                }
                adam.step(&mut model.params, &grads);
                loss_sum += loss;
                batches += 1;
            }
            let train_loss = loss_sum / batches.max(1) as f64;
            let valid = validation_metric(&model, valid_pairs, config.metric)?;
            let entry = EpochLog {
                epoch,
                rho_t: schedule.at(epoch),
                train_loss,
                valid_metric: valid,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            log::info!(
                "epoch {epoch} rho_t {:.2} loss {train_loss:.4} {} {valid:.4}",
                entry.rho_t,
                config.metric
            );
            log.push(entry);
            if stopper.record(epoch, valid) {
                best_params = model.params.clone();
            }
            if stopper.should_stop() {
                break;
            }
        }
        drop(rx);
        Ok(())
    })?;

    let (best_epoch, best_metric) = stopper.best().expect("at least one epoch ran");
    model.params = best_params;
    model.reset_counters();
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_metric,
        log,
    })
}
