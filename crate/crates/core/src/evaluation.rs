//! Closed-loop rollouts with help requests, and the metrics computed from them.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{calibrate, prediction_set, ConformalError, PredictionSet, Threshold};
use crate::encoding::{encode_features, render_prompt_for_state, Dataset};
use crate::gridworld::{
    goal_satisfied, plan_from, Action, DistributionTag, Environment, PlannerLimits, Scenario, ScenarioId,
    NUM_ACTIONS,
};
use crate::model::{ConfidenceModel, StepQuery};
use crate::policy::PolicyError;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no scenarios to evaluate")]
    NoScenarios,
    #[error("no reports to average")]
    NoReports,
    #[error("action `{action}` is not in the prediction set {set:?}")]
    NotInSet { action: &'static str, set: Vec<usize> },
    #[error("stale step index {got}; the pending request is for step {expected}")]
    StaleStep { expected: usize, got: usize },
    #[error("no help request is pending")]
    NothingPending,
    #[error("rollout already finished")]
    Finished,
    #[error("expected {expected} data, got {got}")]
    WrongDistribution { expected: DistributionTag, got: DistributionTag },
    #[error(transparent)]
    Model(#[from] PolicyError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Halted,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Model,
    Helper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub prompt: String,
    pub confidences: [f64; NUM_ACTIONS],
    pub prediction_set: PredictionSet,
    pub help_requested: bool,
    pub executed: Option<Action>,
    pub source: Option<ActionSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub scenario_id: ScenarioId,
    pub steps: Vec<StepTrace>,
    pub outcome: Outcome,
    pub steps_taken: usize,
}

impl RolloutTrace {
    pub fn help_count(&self) -> usize {
        self.steps.iter().filter(|s| s.help_requested).count()
    }

    pub fn executed_actions(&self) -> Vec<Action> {
        self.steps.iter().filter_map(|s| s.executed).collect()
    }
}

/// A step whose prediction set holds more than one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpRequest {
    pub step: usize,
    pub prompt_text: String,
    pub prediction_set: PredictionSet,
    pub confidences: [f64; NUM_ACTIONS],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HelpResponse {
    Choose(Action),
    Halt,
    Abort,
}

/// Whoever answers help requests.
pub trait HelpSource {
    fn help(&mut self, env: &Environment, scenario: &Scenario, request: &HelpRequest) -> HelpResponse;
}

/// Answers with the planner's next action from the current state when it is
/// in the set, and halts otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleHelp {
    pub limits: PlannerLimits,
}

impl OracleHelp {
    pub fn correct_action(&self, env: &Environment, scenario: &Scenario) -> Option<Action> {
        plan_from(env, &scenario.task, self.limits)
            .ok()
            .and_then(|p| p.actions.first().copied())
    }
}

impl HelpSource for OracleHelp {
    fn help(&mut self, env: &Environment, scenario: &Scenario, request: &HelpRequest) -> HelpResponse {
        match self.correct_action(env, scenario) {
            Some(a) if request.prediction_set.contains(a) => HelpResponse::Choose(a),
            _ => HelpResponse::Halt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriverEvent {
    /// The model's singleton set was executed.
    Executed { step: usize, action: Action },
    HelpNeeded(HelpRequest),
    Finished(Outcome),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverStatus {
    Running,
    AwaitingHelp,
    Finished(Outcome),
}

/// Rollout as an explicit state machine: `advance` runs until the next
/// event, and a pending help request blocks everything until `resolve`.
#[derive(Debug, Clone)]
pub struct RolloutDriver<S> {
    scenario: Scenario,
    threshold: Threshold<S>,
    env: Environment,
    history: Vec<Action>,
    steps: Vec<StepTrace>,
    max_steps: usize,
    status: DriverStatus,
    pending: Option<HelpRequest>,
}

impl<S: Scalar> RolloutDriver<S> {
    /// `max_steps` defaults to twice the scenario horizon.
    pub fn new(scenario: Scenario, threshold: Threshold<S>, max_steps: Option<usize>) -> Self {
        let max_steps = max_steps.unwrap_or(2 * scenario.horizon).max(scenario.horizon);
        RolloutDriver {
            env: scenario.environment.clone(),
            scenario,
            threshold,
            history: Vec::new(),
            steps: Vec::new(),
            max_steps,
            status: DriverStatus::Running,
            pending: None,
        }
    }

    pub fn status(&self) -> DriverStatus {
        self.status
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn threshold(&self) -> &Threshold<S> {
        &self.threshold
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    pub fn pending(&self) -> Option<&HelpRequest> {
        self.pending.as_ref()
    }

    pub fn step_index(&self) -> usize {
        self.history.len()
    }

    fn finish(&mut self, outcome: Outcome) -> DriverEvent {
        self.status = DriverStatus::Finished(outcome);
        self.pending = None;
        DriverEvent::Finished(outcome)
    }

    fn execute(&mut self, action: Action, source: ActionSource) -> Option<DriverEvent> {
        let last = self.steps.last_mut().expect("a step was recorded");
        last.executed = Some(action);
        last.source = Some(source);
        self.env.apply(action);
        self.history.push(action);
        if goal_satisfied(&self.env, &self.scenario.task) {
            Some(self.finish(Outcome::Success))
        } else if self.history.len() >= self.max_steps {
            Some(self.finish(Outcome::Failure))
        } else {
            None
        }
    }

    /// Runs one decision step.
    pub fn advance<M: ConfidenceModel<S> + ?Sized>(&mut self, model: &M) -> Result<DriverEvent, EvalError> {
        match self.status {
            DriverStatus::Finished(o) => return Ok(DriverEvent::Finished(o)),
            DriverStatus::AwaitingHelp => {
                return Ok(DriverEvent::HelpNeeded(self.pending.clone().expect("pending request")))
            }
            DriverStatus::Running => {}
        }
        if goal_satisfied(&self.env, &self.scenario.task) {
            return Ok(self.finish(Outcome::Success));
        }
        if self.history.len() >= self.max_steps {
            return Ok(self.finish(Outcome::Failure));
        }
        let t = self.history.len();
        let features = encode_features::<S>(&self.env, &self.scenario.task, &self.history, t);
        let query = StepQuery {
            env: &self.env,
            task: &self.scenario.task,
            history: &self.history,
            t,
            features: &features,
        };
        let conf = model.confidences(&query)?;
        let set = prediction_set(&conf, &self.threshold, t);
        let prompt = render_prompt_for_state(&self.env, &self.scenario.task, &self.history, t).text;
        let confidences = conf.probs.map(|p| p.as_f64());
        let help = set.len() > 1;
        self.steps.push(StepTrace {
            t,
            prompt: prompt.clone(),
            confidences,
            prediction_set: set.clone(),
            help_requested: help,
            executed: None,
            source: None,
        });
        if let Some(a) = set.singleton() {
            return Ok(self.execute(a, ActionSource::Model).unwrap_or(DriverEvent::Executed { step: t, action: a }));
        }
        if set.is_empty() {
            return Ok(self.finish(Outcome::Halted));
        }
        let request = HelpRequest {
            step: t,
            prompt_text: prompt,
            prediction_set: set,
            confidences,
        };
        self.status = DriverStatus::AwaitingHelp;
        self.pending = Some(request.clone());
        Ok(DriverEvent::HelpNeeded(request))
    }

    /// Answers the pending request. A choice outside the set, or for another
    /// step, is rejected and leaves the driver unchanged.
    pub fn resolve(&mut self, step: usize, response: HelpResponse) -> Result<Option<DriverEvent>, EvalError> {
        if matches!(self.status, DriverStatus::Finished(_)) {
            return Err(EvalError::Finished);
        }
        let pending = self.pending.as_ref().ok_or(EvalError::NothingPending)?;
        if !matches!(response, HelpResponse::Abort) && step != pending.step {
            return Err(EvalError::StaleStep {
                expected: pending.step,
                got: step,
            });
        }
        match response {
            HelpResponse::Choose(a) => {
                if !pending.prediction_set.contains(a) {
                    return Err(EvalError::NotInSet {
                        action: a.name(),
                        set: pending.prediction_set.actions.iter().map(|a| a.index()).collect(),
                    });
                }
                self.pending = None;
                self.status = DriverStatus::Running;
                Ok(self.execute(a, ActionSource::Helper))
            }
            HelpResponse::Halt => Ok(Some(self.finish(Outcome::Halted))),
            HelpResponse::Abort => Ok(Some(self.finish(Outcome::Aborted))),
        }
    }

    /// Ends the rollout from outside, e.g. after a session timeout.
    pub fn abort(&mut self) -> DriverEvent {
        self.finish(Outcome::Aborted)
    }

    pub fn trace(&self) -> RolloutTrace {
        RolloutTrace {
            scenario_id: self.scenario.id,
            steps: self.steps.clone(),
            outcome: match self.status {
                DriverStatus::Finished(o) => o,
                _ => Outcome::Aborted,
            },
            steps_taken: self.history.len(),
        }
    }
}

pub fn rollout<S: Scalar, M: ConfidenceModel<S> + ?Sized, H: HelpSource + ?Sized>(
    model: &M,
    threshold: &Threshold<S>,
    scenario: &Scenario,
    help: &mut H,
    max_steps: Option<usize>,
) -> Result<RolloutTrace, EvalError> {
    let mut driver = RolloutDriver::new(scenario.clone(), *threshold, max_steps);
    loop {
        match driver.advance(model)? {
            DriverEvent::Finished(_) => return Ok(driver.trace()),
            DriverEvent::Executed { .. } => {}
            DriverEvent::HelpNeeded(req) => {
                let response = help.help(driver.env(), driver.scenario(), &req);
                if let Some(DriverEvent::Finished(_)) = driver.resolve(req.step, response)? {
                    return Ok(driver.trace());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_set_size: f64,
    pub help_rate: f64,
    pub coverage_rate: f64,
    pub verification_rate: f64,
    /// Fraction of scenarios that ended in a halt; these count against coverage.
    pub halt_rate: f64,
    pub n_scenarios: usize,
    pub n_steps: usize,
    pub alpha: f64,
    pub delta: f64,
    pub seeds: Vec<u64>,
}

impl MetricsReport {
    pub fn from_traces(traces: &[RolloutTrace], alpha: f64, delta: f64, seeds: Vec<u64>) -> Result<Self, EvalError> {
        if traces.is_empty() {
            return Err(EvalError::NoScenarios);
        }
        let n = traces.len() as f64;
        let n_steps: usize = traces.iter().map(|t| t.steps.len()).sum();
        let set_total: usize = traces.iter().flat_map(|t| &t.steps).map(|s| s.prediction_set.len()).sum();
        let helped: usize = traces.iter().flat_map(|t| &t.steps).filter(|s| s.prediction_set.len() > 1).count();
        let success = traces.iter().filter(|t| t.outcome == Outcome::Success).count();
        let verified = traces
            .iter()
            .filter(|t| t.outcome == Outcome::Success && t.help_count() == 0)
            .count();
        let halted = traces.iter().filter(|t| t.outcome == Outcome::Halted).count();
        let per_step = |x: usize| if n_steps == 0 { 0.0 } else { x as f64 / n_steps as f64 };
        Ok(MetricsReport {
            avg_set_size: per_step(set_total),
            help_rate: per_step(helped),
            coverage_rate: success as f64 / n,
            verification_rate: verified as f64 / n,
            halt_rate: halted as f64 / n,
            n_scenarios: traces.len(),
            n_steps,
            alpha,
            delta,
            seeds,
        })
    }

    /// Unweighted mean of per-seed reports.
    pub fn average(reports: &[MetricsReport]) -> Result<Self, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::NoReports);
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            avg_set_size: mean(|r| r.avg_set_size),
            help_rate: mean(|r| r.help_rate),
            coverage_rate: mean(|r| r.coverage_rate),
            verification_rate: mean(|r| r.verification_rate),
            halt_rate: mean(|r| r.halt_rate),
            n_scenarios: reports.iter().map(|r| r.n_scenarios).sum(),
            n_steps: reports.iter().map(|r| r.n_steps).sum(),
            alpha: mean(|r| r.alpha),
            delta: mean(|r| r.delta),
            seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        })
    }
}

/// Oracle-help rollouts of every scenario, and their traces.
pub fn evaluate_traces<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    threshold: &Threshold<S>,
    scenarios: &[Scenario],
) -> Result<Vec<RolloutTrace>, EvalError> {
    if scenarios.is_empty() {
        return Err(EvalError::NoScenarios);
    }
    let mut help = OracleHelp::default();
    scenarios
        .iter()
        .map(|s| rollout(model, threshold, s, &mut help, None))
        .collect()
}

pub fn evaluate<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    threshold: &Threshold<S>,
    scenarios: &[Scenario],
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let traces = evaluate_traces(model, threshold, scenarios)?;
    MetricsReport::from_traces(&traces, threshold.alpha, threshold.delta.as_f64(), vec![seed])
}

/// Several independently trained models, one per seed, averaged.
pub fn evaluate_seeds<S: Scalar, M: ConfidenceModel<S>>(
    runs: &[(u64, M, Threshold<S>)],
    scenarios: &[Scenario],
) -> Result<MetricsReport, EvalError> {
    let reports = runs
        .iter()
        .map(|(seed, m, th)| evaluate(m, th, scenarios, *seed))
        .collect::<Result<Vec<_>, _>>()?;
    MetricsReport::average(&reports)
}

/// Recalibrates at each alpha and evaluates.
pub fn alpha_sweep<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    calib: &Dataset<S>,
    alphas: &[f64],
    scenarios: &[Scenario],
    seed: u64,
) -> Result<Vec<MetricsReport>, EvalError> {
    alphas
        .iter()
        .map(|&a| {
            let th = calibrate(model, calib, a)?;
            evaluate(model, &th, scenarios, seed)
        })
        .collect()
}

/// Calibrates on in-distribution data and evaluates on shifted scenarios.
pub fn ood_evaluate<S: Scalar, M: ConfidenceModel<S> + ?Sized>(
    model: &M,
    calib: &Dataset<S>,
    scenarios: &[Scenario],
    alpha: f64,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    if calib.distribution != DistributionTag::D {
        return Err(EvalError::WrongDistribution {
            expected: DistributionTag::D,
            got: calib.distribution,
        });
    }
    if let Some(s) = scenarios.iter().find(|s| s.distribution != DistributionTag::DPrime) {
        return Err(EvalError::WrongDistribution {
            expected: DistributionTag::DPrime,
            got: s.distribution,
        });
    }
    let th = calibrate(model, calib, alpha)?;
    evaluate(model, &th, scenarios, seed)
}

/// A Markdown table with one row per labelled report.
pub fn markdown_table(first_column: &str, rows: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| {first_column} | Coverage | Avg. set size | Help rate | Verification rate |"
    );
    out.push_str("|---|---|---|---|---|\n");
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "| {label} | {:.1}% | {:.3} | {:.1}% | {:.1}% |",
            100.0 * r.coverage_rate,
            r.avg_set_size,
            100.0 * r.help_rate,
            100.0 * r.verification_rate
        );
    }
    out
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<(), EvalError> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn write_traces(path: impl AsRef<Path>, traces: &[RolloutTrace]) -> Result<(), EvalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
