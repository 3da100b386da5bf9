//! Split-conformal calibration of a plan-level confidence threshold.
//!
//! A calibration scenario is scored by one minus the lowest confidence the
//! model gives the correct action along the ground-truth trajectory. The
//! threshold is one minus the `ceil((D + 1)(1 - alpha))`-th smallest score,
//! and at test time every action with confidence at least the threshold
//! enters the prediction set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::Dataset;
use crate::gridworld::{Action, ScenarioId, NUM_ACTIONS};
use crate::model::{ConfidenceModel, StepQuery};
use crate::policy::{ConfidenceVector, PolicyError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("cannot score an empty trajectory")]
    EmptyTrajectory,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Model(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct NonconformityScore<S> {
    pub value: S,
    /// The minimum confidence the score was computed from; `value == 1 - min_confidence`.
    pub min_confidence: S,
    pub scenario_id: ScenarioId,
}

impl<S: Scalar> NonconformityScore<S> {
    /// A score with no trajectory behind it.
    pub fn from_value(value: S, scenario_id: ScenarioId) -> Self {
        NonconformityScore {
            value,
            min_confidence: S::one() - value,
            scenario_id,
        }
    }
}

pub fn trajectory_ncs<S: Scalar>(
    correct_confidences: &[S],
    scenario_id: ScenarioId,
) -> Result<NonconformityScore<S>, ConformalError> {
    let mut min = S::infinity();
    for &c in correct_confidences {
        if !(c >= S::zero() && c <= S::one()) {
            return Err(ConformalError::InvalidConfidence(c.as_f64()));
        }
        min = min.min(c);
    }
    if correct_confidences.is_empty() {
        return Err(ConformalError::EmptyTrajectory);
    }
    Ok(NonconformityScore {
        value: S::one() - min,
        min_confidence: min,
        scenario_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Threshold<S> {
    pub delta: S,
    pub alpha: f64,
    pub calib_size: usize,
    pub quantile_value: S,
    /// 1-based rank of the selected score; greater than `calib_size` when the
    /// quantile is clamped to 1.
    pub rank: usize,
}

impl<S: Scalar> Threshold<S> {
    /// A threshold not derived from calibration data.
    pub fn fixed(delta: S) -> Self {
        Threshold {
            delta,
            alpha: 0.5,
            calib_size: 0,
            quantile_value: S::one() - delta,
            rank: 0,
        }
    }
}

/// `ceil((D + 1)(1 - alpha))`, computed without trusting the float product
/// when it lands on an integer.
pub fn quantile_rank(calib_size: usize, alpha: f64) -> usize {
    let x = (calib_size as f64 + 1.0) * (1.0 - alpha);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn conformal_threshold<S: Scalar>(
    scores: &[NonconformityScore<S>],
    alpha: f64,
) -> Result<Threshold<S>, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if scores.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let d = scores.len();
    let k = quantile_rank(d, alpha);
    if k > d {
        return Ok(Threshold {
            delta: S::zero(),
            alpha,
            calib_size: d,
            quantile_value: S::one(),
            rank: k,
        });
    }
    let mut sorted: Vec<&NonconformityScore<S>> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .expect("finite scores")
            .then(b.min_confidence.partial_cmp(&a.min_confidence).expect("finite"))
    });
    let chosen = sorted[k - 1];
    Ok(Threshold {
        // exactly the confidence that produced the score, so the trajectory
        // it came from is covered under `>=`
        delta: chosen.min_confidence,
        alpha,
        calib_size: d,
        quantile_value: chosen.value,
        rank: k,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Member actions in index order.
    pub actions: Vec<Action>,
    pub step_index: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, a: Action) -> bool {
        self.actions.contains(&a)
    }

    pub fn singleton(&self) -> Option<Action> {
        match self.actions.as_slice() {
            [a] => Some(*a),
            _ => None,
        }
    }
}

pub fn prediction_set<S: Scalar>(
    confidences: &ConfidenceVector<S>,
    threshold: &Threshold<S>,
    t: usize,
) -> PredictionSet {
    PredictionSet {
        actions: (0..NUM_ACTIONS)
            .filter(|&k| confidences.probs[k] >= threshold.delta)
            .map(|k| Action::ALL[k])
            .collect(),
        step_index: t,
    }
}

/// Scores every calibration scenario along its ground-truth trajectory.
pub fn calibration_scores<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    calib: &Dataset<S>,
) -> Result<Vec<NonconformityScore<S>>, ConformalError> {
    let mut scores = Vec::with_capacity(calib.len());
    for entry in &calib.entries {
        let mut env = entry.scenario.environment.clone();
        let mut correct = Vec::with_capacity(entry.steps.len());
        for record in &entry.steps {
            let query = StepQuery {
                env: &env,
                task: &entry.scenario.task,
                history: &entry.plan.actions[..record.t],
                t: record.t,
                features: &record.features,
            };
            let conf = model.confidences(&query)?;
            correct.push(conf.of(record.correct_action));
            env.apply(record.correct_action);
        }
        scores.push(trajectory_ncs(&correct, entry.scenario.id)?);
    }
    Ok(scores)
}

pub fn calibrate<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    calib: &Dataset<S>,
    alpha: f64,
) -> Result<Threshold<S>, ConformalError> {
    conformal_threshold(&calibration_scores(model, calib)?, alpha)
}

pub const HISTOGRAM_BINS: usize = 20;

/// Contents of the calibration report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alpha: f64,
    pub calib_size: usize,
    pub quantile_value: f64,
    pub delta: f64,
    pub rank: usize,
    /// Counts of scores in `HISTOGRAM_BINS` equal bins over [0, 1].
    pub score_histogram: Vec<usize>,
}

impl CalibrationReport {
    pub fn new<S: Scalar>(threshold: &Threshold<S>, scores: &[NonconformityScore<S>]) -> Self {
        let mut hist = vec![0; HISTOGRAM_BINS];
        for s in scores {
            let bin = ((s.value.as_f64() * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            hist[bin] += 1;
        }
        CalibrationReport {
            alpha: threshold.alpha,
            calib_size: threshold.calib_size,
            quantile_value: threshold.quantile_value.as_f64(),
            delta: threshold.delta.as_f64(),
            rank: threshold.rank,
            score_histogram: hist,
        }
    }
}
