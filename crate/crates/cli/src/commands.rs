//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use cofine_core::conformal::{calibrate, calibration_scores, conformal_threshold, CalibrationReport, Threshold};
use cofine_core::encoding::{Dataset, Split};
use cofine_core::evaluation::{
    evaluate_traces, markdown_table, rollout, write_report, write_traces, MetricsReport, OracleHelp, RolloutTrace,
};
use cofine_core::gridworld::{sample_scenario, DistributionTag, ObjectKind, Scenario};
use cofine_core::model::{ConfidenceModel, OracleMimic, UniformModel};
use cofine_core::policy::{Architecture, Checkpoint, Mlp};
use cofine_core::training::{finetune, split_monitor, LossConfig, Method, TrainHooks, TrainState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig};
use crate::data::{self, DatasetFile};
use crate::server::{self, AppState, ScenarioSource, ServeConfig, SharedModel};

/// Contents of the threshold file written by `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub threshold: Threshold<f64>,
    pub report: CalibrationReport,
    pub checkpoint: Option<PathBuf>,
    pub calib_stream_seed: u64,
    pub master_seed: u64,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp<f64>> {
    Ok(Checkpoint::<f64>::load(path, None)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params)
}

pub fn load_threshold(path: &Path) -> Result<Threshold<f64>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ThresholdFile = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(file.threshold)
}

/// A stand-in policy for debugging the rollout loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BuiltinModel {
    Uniform,
    Oracle,
}

pub fn model_from(checkpoint: Option<&Path>, builtin: Option<BuiltinModel>) -> Result<SharedModel> {
    Ok(match (checkpoint, builtin) {
        (Some(_), Some(_)) => return Err(ConfigError::Invalid("give either --checkpoint or --model".into()).into()),
        (Some(p), None) => Arc::new(load_checkpoint(p)?),
        (None, Some(BuiltinModel::Uniform)) => Arc::new(UniformModel),
        (None, Some(BuiltinModel::Oracle)) => Arc::new(OracleMimic::default()),
        (None, None) => return Err(ConfigError::Invalid("a --checkpoint or --model is required".into()).into()),
    })
}

pub fn gen_data(config: &RunConfig, dir: &Path) -> Result<Value> {
    let manifest = data::write_splits(config, dir)?;
    Ok(json!({ "data_dir": dir, "manifest": manifest }))
}

pub struct TrainRun {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub state: TrainState<f64>,
}

/// Trains one model on `train` with the given seed for init and shuffling.
pub fn train_one(config: &RunConfig, train: &Dataset<f64>, calib: &Dataset<f64>, seed: u64, run_dir: &Path) -> Result<TrainRun> {
    let (fit, monitor) = split_monitor(train.clone(), config.monitor_fraction);
    let initial = Mlp::init(Architecture::for_features(config.hidden.clone()), seed);
    let mut train_config = config.train.clone();
    train_config.seed = seed;
    let hooks = TrainHooks {
        monitor: (!monitor.is_empty()).then_some(&monitor),
        run_dir: Some(run_dir),
        observer: None,
    };
    let state = finetune(initial, &fit, calib, &config.loss, &train_config, hooks)?;
    Ok(TrainRun {
        seed,
        run_dir: run_dir.to_path_buf(),
        state,
    })
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::CoFineLlm => "cofinellm",
        Method::Ua => "ua",
        Method::ConfTr => "conftr",
    }
}

pub fn default_run_dir(config: &RunConfig, seed: u64) -> PathBuf {
    let m = method_name(config.loss.method);
    let name = match config.loss.method {
        Method::Ua => format!("train-{m}-seed{seed}"),
        _ => format!("train-{m}-lambda{}-seed{seed}", config.loss.lambda),
    };
    config.output_dir.join(name)
}

pub fn train(config: &RunConfig, data_dir: Option<&PathBuf>, run_dir: Option<&Path>) -> Result<Value> {
    let splits = data::load_or_generate(config, data_dir)?;
    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| default_run_dir(config, config.seed));
    let run = train_one(config, &splits.train, &splits.calib, config.seed, &dir)?;
    let last = run.state.history.last();
    Ok(json!({
        "run_dir": run.run_dir,
        "checkpoint": run.run_dir.join("final.json"),
        "seed": run.seed,
        "method": method_name(config.loss.method),
        "lambda": config.loss.effective_lambda(),
        "epochs_run": run.state.epoch,
        "model_epoch": run.state.model_epoch,
        "stopped_early": run.state.stopped_early,
        "training_delta": run.state.threshold.delta,
        "final_ce": last.map(|m| m.ce),
    }))
}

fn threshold_file(model: &dyn ConfidenceModel<f64>, calib: &Dataset<f64>, alpha: f64, config: &RunConfig, checkpoint: Option<&Path>) -> Result<ThresholdFile> {
    let scores = calibration_scores(model, calib)?;
    let threshold = conformal_threshold(&scores, alpha)?;
    Ok(ThresholdFile {
        report: CalibrationReport::new(&threshold, &scores),
        threshold,
        checkpoint: checkpoint.map(Path::to_path_buf),
        calib_stream_seed: calib.seed,
        master_seed: config.seed,
    })
}

pub fn calibrate_cmd(config: &RunConfig, data_dir: Option<&PathBuf>, model: &dyn ConfidenceModel<f64>, checkpoint: Option<&Path>, out: &Path) -> Result<Value> {
    let calib = match data_dir {
        Some(_) => data::load_or_generate(config, data_dir)?.calib,
        None => data::generate(config, Split::Calibration)?,
    };
    let file = threshold_file(model, &calib, config.alpha, config, checkpoint)?;
    write_json(out, &file)?;
    Ok(json!({ "threshold_file": out, "delta": file.threshold.delta, "alpha": file.threshold.alpha, "calib_size": file.threshold.calib_size }))
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    report: &'a MetricsReport,
    report_file: PathBuf,
    traces_file: PathBuf,
    table_file: PathBuf,
    master_seed: u64,
    val_stream_seed: u64,
}

fn write_eval(dir: &Path, label: &str, traces: &[RolloutTrace], report: &MetricsReport) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let report_file = dir.join(format!("{label}-report.json"));
    let traces_file = dir.join(format!("{label}-traces.jsonl"));
    write_report(&report_file, report)?;
    write_traces(&traces_file, traces)?;
    Ok((report_file, traces_file))
}

fn scenarios_of(data: &Dataset<f64>) -> Vec<Scenario> {
    data.scenarios().cloned().collect()
}

fn evaluate_with(model: &dyn ConfidenceModel<f64>, th: &Threshold<f64>, scenarios: &[Scenario], seeds: Vec<u64>) -> Result<(Vec<RolloutTrace>, MetricsReport)> {
    let traces = evaluate_traces(model, th, scenarios)?;
    let report = MetricsReport::from_traces(&traces, th.alpha, th.delta, seeds)?;
    Ok((traces, report))
}

pub fn eval(config: &RunConfig, data_dir: Option<&PathBuf>, model: &dyn ConfidenceModel<f64>, threshold: Option<Threshold<f64>>) -> Result<Value> {
    let splits = data::load_or_generate(config, data_dir)?;
    let th = match threshold {
        Some(t) => t,
        None => calibrate(model, &splits.calib, config.alpha)?,
    };
    let (traces, report) = evaluate_with(model, &th, &scenarios_of(&splits.val), vec![config.seed])?;
    let dir = config.output_dir.join("eval");
    let (report_file, traces_file) = write_eval(&dir, "val", &traces, &report)?;
    let table_file = dir.join("val-table.md");
    std::fs::write(&table_file, markdown_table("Method", &[("model".to_string(), &report)]))?;
    Ok(serde_json::to_value(EvalSummary {
        report: &report,
        report_file,
        traces_file,
        table_file,
        master_seed: config.seed,
        val_stream_seed: splits.val.seed,
    })?)
}

pub fn sweep_alpha(config: &RunConfig, data_dir: Option<&PathBuf>, model: &dyn ConfidenceModel<f64>, alphas: &[f64]) -> Result<Value> {
    for &a in alphas {
        if !(a > 0.0 && a < 1.0) {
            return Err(ConfigError::Invalid(format!("alpha {a} outside (0, 1)")).into());
        }
    }
    let splits = data::load_or_generate(config, data_dir)?;
    let scenarios = scenarios_of(&splits.val);
    let dir = config.output_dir.join("sweep-alpha");
    let mut reports = Vec::new();
    for &a in alphas {
        let th = calibrate(model, &splits.calib, a)?;
        let (traces, report) = evaluate_with(model, &th, &scenarios, vec![config.seed])?;
        write_eval(&dir, &format!("alpha{a}"), &traces, &report)?;
        reports.push(report);
    }
    let rows: Vec<(String, &MetricsReport)> = alphas
        .iter()
        .zip(&reports)
        .map(|(a, r)| (format!("{:.0}%", 100.0 * (1.0 - a)), r))
        .collect();
    let table = markdown_table("Coverage level", &rows);
    std::fs::write(dir.join("table.md"), &table)?;
    Ok(json!({ "reports": reports, "table": table, "dir": dir }))
}

/// Target split for `sweep-lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepTarget {
    Val,
    Ood,
}

pub fn sweep_lambda(config: &RunConfig, data_dir: Option<&PathBuf>, lambdas: &[f64], target: SweepTarget) -> Result<Value> {
    for &l in lambdas {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(ConfigError::Invalid(format!("lambda {l} must be finite and >= 0")).into());
        }
    }
    let splits = data::load_or_generate(config, data_dir)?;
    let scenarios = match target {
        SweepTarget::Val => scenarios_of(&splits.val),
        SweepTarget::Ood => scenarios_of(&data::generate(config, Split::Ood)?),
    };
    let dir = config.output_dir.join("sweep-lambda");
    let mut reports = Vec::new();
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.loss = LossConfig {
            method: Method::CoFineLlm,
            lambda,
            ..config.loss
        };
        let mut per_seed = Vec::new();
        for seed in cfg.seed_list() {
            let run = train_one(&cfg, &splits.train, &splits.calib, seed, &default_run_dir(&cfg, seed))?;
            let th = calibrate(&run.state.model, &splits.calib, cfg.alpha)?;
            let (traces, report) = evaluate_with(&run.state.model, &th, &scenarios, vec![seed])?;
            write_eval(&dir, &format!("lambda{lambda}-seed{seed}"), &traces, &report)?;
            per_seed.push(report);
        }
        let avg = MetricsReport::average(&per_seed)?;
        write_report(dir.join(format!("lambda{lambda}-report.json")), &avg)?;
        reports.push(avg);
    }
    let rows: Vec<(String, &MetricsReport)> = lambdas.iter().zip(&reports).map(|(l, r)| (format!("λ = {l}"), r)).collect();
    let table = markdown_table("CoFineLLM", &rows);
    std::fs::write(dir.join("table.md"), &table)?;
    Ok(json!({ "reports": reports, "table": table, "dir": dir }))
}

/// Words naming in-distribution object kinds.
pub fn d_vocabulary() -> Vec<&'static str> {
    DistributionTag::D.kinds().iter().map(|k: &ObjectKind| k.name()).collect()
}

/// Prompts from `traces` that mention an in-distribution object kind.
pub fn vocabulary_violations(traces: &[RolloutTrace]) -> Vec<(u64, usize)> {
    let words = d_vocabulary();
    let mut bad = Vec::new();
    for tr in traces {
        for s in &tr.steps {
            let hit = s
                .prompt
                .split(|c: char| !c.is_alphanumeric())
                .any(|w| words.contains(&w));
            if hit {
                bad.push((tr.scenario_id, s.t));
            }
        }
    }
    bad
}

pub fn eval_ood(config: &RunConfig, data_dir: Option<&PathBuf>, model: &dyn ConfidenceModel<f64>) -> Result<Value> {
    let calib = match data_dir {
        Some(_) => data::load_or_generate(config, data_dir)?.calib,
        None => data::generate(config, Split::Calibration)?,
    };
    if calib.distribution != DistributionTag::D {
        return Err(ConfigError::Invalid("eval-ood calibrates on D; set distribution to D".into()).into());
    }
    let ood = data::generate(config, Split::Ood)?;
    let th = calibrate(model, &calib, config.alpha)?;
    let (traces, report) = evaluate_with(model, &th, &scenarios_of(&ood), vec![config.seed])?;
    let violations = vocabulary_violations(&traces);
    let dir = config.output_dir.join("eval-ood");
    let (report_file, traces_file) = write_eval(&dir, "ood", &traces, &report)?;
    let table = markdown_table("Method", &[("model".to_string(), &report)]);
    std::fs::write(dir.join("table.md"), &table)?;
    Ok(json!({
        "report": report,
        "report_file": report_file,
        "traces_file": traces_file,
        "vocabulary_ok": violations.is_empty(),
        "vocabulary_violations": violations,
        "ood_stream_seed": ood.seed,
        "calib_stream_seed": calib.seed,
    }))
}

pub fn rollout_cmd(config: &RunConfig, model: &dyn ConfidenceModel<f64>, threshold: Option<Threshold<f64>>, scenario_seed: u64) -> Result<Value> {
    let scenario = sample_scenario(scenario_seed, config.distribution)?;
    let th = match threshold {
        Some(t) => t,
        None => calibrate(model, &data::generate(config, Split::Calibration)?, config.alpha)?,
    };
    let trace = rollout(model, &th, &scenario, &mut OracleHelp::default(), None)?;
    Ok(json!({ "mission": scenario.task.mission_text, "delta": th.delta, "trace": trace }))
}

pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    pub disconnect_timeout: Duration,
    pub scenarios: Option<PathBuf>,
}

pub fn serve(config: &RunConfig, model: SharedModel, threshold: Threshold<f64>, options: ServeOptions) -> Result<()> {
    let source = match &options.scenarios {
        Some(p) => {
            let list: Vec<Scenario> = DatasetFile::load(p)?.scenarios.into_iter().map(|r| r.scenario).collect();
            if list.is_empty() {
                return Err(ConfigError::Invalid(format!("{} holds no scenarios", p.display())).into());
            }
            ScenarioSource::List(list)
        }
        None => ScenarioSource::Sampled(config.distribution),
    };
    let state = AppState::new(
        model,
        threshold,
        source,
        ServeConfig {
            disconnect_timeout: options.disconnect_timeout,
            max_steps: None,
        },
    );
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((options.host.as_str(), options.port)).await?;
        let addr = listener.local_addr()?;
        println!("{}", json!({ "listening": addr.to_string(), "delta": threshold.delta }));
        server::serve(state, listener).await?;
        Ok(())
    })
}
