//! Argument parsing and dispatch. Failures are reported on stderr as one
//! JSON object: exit 2 for usage errors, 3 for invalid configuration, 1
//! for everything else.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use cofine_core::conformal::Threshold;
use cofine_core::gridworld::DistributionTag;
use cofine_core::training::{Gate, Method, TrainError};
use serde_json::{json, Value};

use crate::commands::{self, BuiltinModel, ServeOptions, SweepTarget};
use crate::config::{ConfigError, RunConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cofine", version, about = "Conformal fine-tuning of a grid-world action policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Miscoverage level used for calibration and training.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Directory written by `gen-data`; splits are regenerated from the seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub distribution: Option<DistributionTag>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub calib_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub ood_size: Option<usize>,
    /// Number of training seeds for multi-seed commands.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sigmoid gate temperature; the hard gate is used when absent.
    #[arg(long)]
    pub sigmoid_gate: Option<f64>,
}

/// Which policy to run.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Use a built-in policy instead of a checkpoint.
    #[arg(long, value_enum)]
    pub model: Option<BuiltinModel>,
    /// Threshold file written by `calibrate`.
    #[arg(long)]
    pub threshold: Option<PathBuf>,
    /// Fixed threshold, bypassing calibration.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train, calibration and validation splits and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Compute the conformal threshold of a model on the calibration split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Where to write the threshold file; defaults to `<out>/threshold.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Oracle-help rollouts on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Recalibrate and evaluate at several alphas.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.15,0.10,0.04")]
        values: Vec<f64>,
    },
    /// Train and evaluate one set of models per lambda.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5")]
        values: Vec<f64>,
        #[arg(long, value_enum, default_value = "val")]
        target: SweepTarget,
    },
    /// Calibrate on D and evaluate on shifted D' scenarios.
    EvalOod {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Serve interactive help sessions over HTTP and websockets.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Seconds a session waits for a disconnected client before aborting.
        #[arg(long, default_value_t = 300)]
        disconnect_timeout_secs: u64,
        /// Dataset file whose scenarios sessions are drawn from.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
    /// Roll out one scenario with oracle help and print the trace.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        scenario_seed: u64,
    },
}

/// Loads the config file, applies flag overrides and validates the result.
pub fn resolve_config(common: &Common) -> Result<RunConfig, ConfigError> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(o) = &common.out {
        c.output_dir = o.clone();
    }
    if let Some(a) = common.alpha {
        c.alpha = a;
        c.loss.alpha = a;
    }
    if let Some(d) = common.distribution {
        c.distribution = d;
    }
    if let Some(n) = common.train_size {
        c.sizes.train = n;
    }
    if let Some(n) = common.calib_size {
        c.sizes.calib = n;
    }
    if let Some(n) = common.val_size {
        c.sizes.val = n;
    }
    if let Some(n) = common.ood_size {
        c.sizes.ood = n;
    }
    if let Some(n) = common.seeds {
        c.seeds = n;
    }
    if let Some(h) = &common.hidden {
        c.hidden = h.clone();
    }
    if let Some(e) = common.epochs {
        c.train.epochs = e;
    }
    if let Some(m) = common.method {
        c.loss.method = m;
    }
    if let Some(l) = common.lambda {
        c.loss.lambda = l;
    }
    if let Some(t) = common.sigmoid_gate {
        c.loss.gate = Gate::Sigmoid { temperature: t };
    }
    c.validate()?;
    Ok(c)
}

fn threshold_arg(model: &ModelArgs) -> Result<Option<Threshold<f64>>> {
    match (&model.threshold, model.delta) {
        (Some(_), Some(_)) => Err(ConfigError::Invalid("give either --threshold or --delta".into()).into()),
        (Some(p), None) => Ok(Some(commands::load_threshold(p)?)),
        (None, Some(d)) if (0.0..=1.0).contains(&d) => Ok(Some(Threshold::fixed(d))),
        (None, Some(d)) => Err(ConfigError::Invalid(format!("delta {d} outside [0, 1]")).into()),
        (None, None) => Ok(None),
    }
}

pub fn run(command: Command) -> Result<Value> {
    match command {
        Command::GenData { common } => {
            let c = resolve_config(&common)?;
            let dir = common.data.clone().unwrap_or_else(|| c.output_dir.join("data"));
            commands::gen_data(&c, &dir)
        }
        Command::Train { common, run_dir } => {
            let c = resolve_config(&common)?;
            commands::train(&c, common.data.as_ref(), run_dir.as_deref())
        }
        Command::Calibrate { common, model, output } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            let out = output.unwrap_or_else(|| c.output_dir.join("threshold.json"));
            commands::calibrate_cmd(&c, common.data.as_ref(), m.as_ref(), model.checkpoint.as_deref(), &out)
        }
        Command::Eval { common, model } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            commands::eval(&c, common.data.as_ref(), m.as_ref(), threshold_arg(&model)?)
        }
        Command::SweepAlpha { common, model, values } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            commands::sweep_alpha(&c, common.data.as_ref(), m.as_ref(), &values)
        }
        Command::SweepLambda { common, values, target } => {
            let c = resolve_config(&common)?;
            commands::sweep_lambda(&c, common.data.as_ref(), &values, target)
        }
        Command::EvalOod { common, model } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            commands::eval_ood(&c, common.data.as_ref(), m.as_ref())
        }
        Command::Serve {
            common,
            model,
            host,
            port,
            disconnect_timeout_secs,
            scenarios,
        } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            let th = threshold_arg(&model)?
                .ok_or_else(|| ConfigError::Invalid("serve needs --threshold or --delta".into()))?;
            commands::serve(
                &c,
                m,
                th,
                ServeOptions {
                    host,
                    port,
                    disconnect_timeout: Duration::from_secs(disconnect_timeout_secs),
                    scenarios,
                },
            )?;
            Ok(json!({ "stopped": true }))
        }
        Command::Rollout {
            common,
            model,
            scenario_seed,
        } => {
            let c = resolve_config(&common)?;
            let m = commands::model_from(model.checkpoint.as_deref(), model.model)?;
            commands::rollout_cmd(&c, m.as_ref(), threshold_arg(&model)?, scenario_seed)
        }
    }
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<ConfigError>(),
            Some(ConfigError::Invalid(_) | ConfigError::Parse { .. })
        )
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::InvalidConfig(_)))
    })
}

fn report_error(kind: &str, message: String) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

/// Parses `argv`, runs the subcommand, and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", e.render().to_string());
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) if is_validation(&e) => {
            report_error("validation", format!("{e:#}"));
            EXIT_INVALID
        }
        Err(e) => {
            report_error("runtime", format!("{e:#}"));
            EXIT_FAILURE
        }
    }
}
