//! Fine-tuning: losses, curriculum phases and the training loop with a
//! periodically refreshed conformal threshold.

mod curriculum;
mod loss;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{calibrate, ConformalError, Threshold};
use crate::encoding::{Dataset, StepRecord};
use crate::gridworld::Action;
use crate::policy::{Adam, AdamConfig, Checkpoint, ConfidenceVector, Gradients, Mlp, PolicyError, RngState};
use crate::scalar::Scalar;

pub use curriculum::{curriculum_filter, Curriculum, CurriculumSchedule};
pub use loss::{
    ce_loss, combined_loss, conftr_loss, conftr_term, cp_loss, cp_term, softmax_pullback, strongest_rival,
    BatchLoss, Gate, LossConfig, LossValue, Method, CONFTR_LOG_FLOOR,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss evaluated on an empty batch")]
    EmptyBatch,
    #[error("{confidences} confidence vectors but {labels} labels")]
    BatchMismatch { confidences: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite values at epoch {epoch}, batch {batch}: {what}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        what: &'static str,
        diagnostic: Box<Diagnostic>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What was known when training diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub ce: f64,
    pub regularizer: f64,
    pub delta: f64,
    pub scenario_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// The threshold is recalibrated at epochs 1, 1 + K, 1 + 2K, ...
    pub refresh_period: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub curriculum: CurriculumSchedule,
    /// Epochs without improvement in monitor CE before stopping; counted only
    /// once the last curriculum phase is active.
    pub patience: Option<usize>,
    /// Return the parameters with the lowest monitor CE rather than the last.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            refresh_period: 10,
            seed: 0,
            optimizer: AdamConfig::default(),
            curriculum: CurriculumSchedule::default(),
            patience: Some(10),
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.refresh_period == 0 {
            return bad("refresh_period must be >= 1");
        }
        if self.patience == Some(0) {
            return bad("patience must be >= 1 when set");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return bad("optimizer settings out of range");
        }
        self.curriculum.validate()
    }

    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        (epoch - 1) % self.refresh_period == 0
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: usize,
    pub pool_steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub regularizer: f64,
    pub delta: f64,
    pub threshold_refreshed: bool,
    pub monitor_ce: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub model: Mlp<S>,
    pub optimizer: Adam<S>,
    pub threshold: Arc<Threshold<S>>,
    /// Last epoch run.
    pub epoch: usize,
    /// Epoch whose parameters `model` holds.
    pub model_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub refresh_epochs: Vec<usize>,
    pub stopped_early: bool,
    pub rng: RngState,
}

/// Callbacks for watching a run; every method defaults to doing nothing.
pub trait TrainObserver<S: Scalar> {
    fn on_refresh(&mut self, _epoch: usize, _threshold: &Arc<Threshold<S>>) {}
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _threshold: &Arc<Threshold<S>>) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl<S: Scalar> TrainObserver<S> for () {}

/// Optional extras for [`finetune`].
pub struct TrainHooks<'a, S: Scalar> {
    /// Held-out data whose CE drives early stopping.
    pub monitor: Option<&'a Dataset<S>>,
    /// Where config, metrics and checkpoints are written.
    pub run_dir: Option<&'a Path>,
    pub observer: Option<&'a mut dyn TrainObserver<S>>,
}

impl<S: Scalar> Default for TrainHooks<'_, S> {
    fn default() -> Self {
        TrainHooks {
            monitor: None,
            run_dir: None,
            observer: None,
        }
    }
}

/// Moves the last `ceil(n * fraction)` entries of `dataset` into a second set.
pub fn split_monitor<S: Scalar>(mut dataset: Dataset<S>, fraction: f64) -> (Dataset<S>, Dataset<S>) {
    let n = dataset.entries.len();
    let m = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
    let tail = dataset.entries.split_off(n - m);
    let monitor = Dataset {
        distribution: dataset.distribution,
        seed: dataset.seed,
        entries: tail,
    };
    (dataset, monitor)
}

/// Mean `-log p_y` over every step of `dataset`.
pub fn mean_ce<S: Scalar>(model: &Mlp<S>, dataset: &Dataset<S>) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in dataset.steps() {
        total -= model.forward(&r.features)?.log_probs[r.correct_action.index()].as_f64();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn checkpoint_path(dir: &Path, epoch: usize) -> std::path::PathBuf {
    dir.join(format!("checkpoint-epoch-{epoch:03}.json"))
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    scalar: &'static str,
    init_seed: u64,
    architecture: &'a crate::policy::Architecture,
    loss: &'a LossConfig,
    train: &'a TrainConfig,
    train_seed: u64,
    calib_seed: u64,
    train_scenarios: usize,
    calib_scenarios: usize,
}

pub fn finetune<S: Scalar>(
    initial: Mlp<S>,
    train: &Dataset<S>,
    calib: &Dataset<S>,
    loss: &LossConfig,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_, S>,
) -> Result<TrainState<S>, TrainError> {
    loss.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if calib.is_empty() {
        return Err(TrainError::EmptyDataset("calibration"));
    }
    let mut metrics_log = match hooks.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let snapshot = RunSnapshot {
                scalar: S::NAME,
                init_seed: initial.init_seed,
                architecture: &initial.architecture,
                loss,
                train: config,
                train_seed: train.seed,
                calib_seed: calib.seed,
                train_scenarios: train.len(),
                calib_scenarios: calib.len(),
            };
            fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&snapshot)?)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let curriculum = Curriculum::new(train, config.curriculum.clone(), &mut rng);
    let mut model = initial;
    let mut adam = Adam::new(&model, config.optimizer);
    let mut grads = Gradients::zeros_like(&model);
    let mut threshold: Option<Arc<Threshold<S>>> = None;
    let mut history = Vec::new();
    let mut refresh_epochs = Vec::new();
    let mut best: Option<(f64, usize, Mlp<S>)> = None;
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut last_epoch = 0;

    for epoch in 1..=config.epochs {
        last_epoch = epoch;
        let refreshed = config.is_refresh_epoch(epoch);
        if refreshed {
            let th = Arc::new(calibrate(&model, calib, loss.alpha)?);
            if let Some(obs) = hooks.observer.as_deref_mut() {
                obs.on_refresh(epoch, &th);
            }
            threshold = Some(th);
            refresh_epochs.push(epoch);
            if let Some(dir) = hooks.run_dir {
                Checkpoint::new(model.clone(), Some(adam.clone()), Some(RngState::capture(&rng)), epoch - 1)
                    .save(checkpoint_path(dir, epoch))?;
            }
        }
        let th = threshold.clone().expect("threshold set at epoch 1");
        let delta = th.delta;

        let mut pool: Vec<&StepRecord<S>> = curriculum_filter(train, epoch, &curriculum);
        pool.shuffle(&mut rng);
        let (mut sum_total, mut sum_ce, mut sum_reg) = (0.0, 0.0, 0.0);
        for (b, chunk) in pool.chunks(config.batch_size).enumerate() {
            if let Some(obs) = hooks.observer.as_deref_mut() {
                obs.on_batch(epoch, b, &th);
            }
            let traces = chunk
                .iter()
                .map(|r| model.forward_trace(&r.features))
                .collect::<Result<Vec<_>, _>>()?;
            let confs: Vec<ConfidenceVector<S>> = traces.iter().map(|t| t.confidences).collect();
            let ys: Vec<Action> = chunk.iter().map(|r| r.correct_action).collect();
            let bl = combined_loss(&confs, &ys, delta, loss)?;
            let finite = bl.total.is_finite() && bl.logit_grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                let diagnostic = Diagnostic {
                    epoch,
                    batch: b,
                    total: bl.total.as_f64(),
                    ce: bl.ce.as_f64(),
                    regularizer: bl.regularizer.as_f64(),
                    delta: delta.as_f64(),
                    scenario_ids: chunk.iter().map(|r| r.scenario_id).collect(),
                };
                if let Some(dir) = hooks.run_dir {
                    fs::write(dir.join("diverged.json"), serde_json::to_vec_pretty(&diagnostic)?)?;
                    Checkpoint::new(model.clone(), Some(adam.clone()), Some(RngState::capture(&rng)), epoch - 1)
                        .save(dir.join("diverged-checkpoint.json"))?;
                }
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    what: "loss",
                    diagnostic: Box::new(diagnostic),
                });
            }
            grads.clear();
            for ((r, trace), g) in chunk.iter().zip(&traces).zip(&bl.logit_grads) {
                model.accumulate_backward(&r.features, trace, g, &mut grads)?;
            }
            adam.apply(&mut model, &grads);
            let w = chunk.len() as f64;
            sum_total += bl.total.as_f64() * w;
            sum_ce += bl.ce.as_f64() * w;
            sum_reg += bl.regularizer.as_f64() * w;
        }
        if !model.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: pool.len().div_ceil(config.batch_size),
                what: "parameters",
                diagnostic: Box::new(Diagnostic {
                    epoch,
                    batch: 0,
                    total: sum_total,
                    ce: sum_ce,
                    regularizer: sum_reg,
                    delta: delta.as_f64(),
                    scenario_ids: Vec::new(),
                }),
            });
        }

        let monitor_ce = match hooks.monitor {
            Some(m) if !m.is_empty() => Some(mean_ce(&model, m)?),
            _ => None,
        };
        let n = pool.len().max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            phase: config.curriculum.phase(epoch),
            pool_steps: pool.len(),
            loss: sum_total / n,
            ce: sum_ce / n,
            regularizer: sum_reg / n,
            delta: delta.as_f64(),
            threshold_refreshed: refreshed,
            monitor_ce,
        };
        if let Some(log) = metrics_log.as_mut() {
            serde_json::to_writer(&mut *log, &metrics)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        if let Some(obs) = hooks.observer.as_deref_mut() {
            obs.on_epoch(&metrics);
        }
        history.push(metrics);

        if let Some(ce) = monitor_ce {
            if epoch >= config.curriculum.final_phase_start() {
                if best.as_ref().map_or(true, |(b, _, _)| ce < *b) {
                    best = Some((ce, epoch, model.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
                if config.patience.is_some_and(|p| stale >= p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (model, model_epoch) = match best {
        Some((_, e, m)) if config.restore_best => (m, e),
        _ => (model, last_epoch),
    };
    let rng_state = RngState::capture(&rng);
    if let Some(dir) = hooks.run_dir {
        Checkpoint::new(model.clone(), Some(adam.clone()), Some(rng_state.clone()), model_epoch)
            .save(dir.join("final.json"))?;
    }
    Ok(TrainState {
        model,
        optimizer: adam,
        threshold: threshold.expect("at least one epoch ran"),
        epoch: last_epoch,
        model_epoch,
        history,
        refresh_epochs,
        stopped_early,
        rng: rng_state,
    })
}
