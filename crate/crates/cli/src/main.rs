//! `edmcast`: one executable tying the pipeline together. Subcommands:
//! make-data, train, sample, rollout, evaluate, evaluate-ae, gridsearch.
//!
//! Configuration is layered: `--config` file (INI-style `key = value` or the
//! JSON resolved dump of a previous run) < `EDM_*` environment < flags. Every
//! run writes `resolved_config.json` and a `run.json` provenance manifest
//! next to its artifacts, and never writes outside `--out`.
//!
//! Exit codes: 0 success, 1 user error (bad flags, bad config, bad inputs),
//! 2 internal error.

mod cmd_evaluate;
mod cmd_gridsearch;
mod cmd_make_data;
mod cmd_rollout;
mod cmd_sample;
mod cmd_train;
mod config;
mod pgm;
mod provenance;
mod tensors;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use edmcast_core::CoreError;

use config::RunConfig;

// --- failure taxonomy --------------------------------------------------------

#[derive(Debug)]
pub enum Failure {
    /// The invocation or its inputs are wrong; fixable by the caller.
    User(String),
    /// The pipeline itself broke.
    Internal(String),
}

impl Failure {
    pub fn user(msg: impl Into<String>) -> Failure {
        Failure::User(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Failure {
        Failure::Internal(msg.into())
    }

    fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::User(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Failure {
        match e {
            CoreError::UnitMismatch { .. }
            | CoreError::ShapeMismatch(_)
            | CoreError::InvalidArgument(_)
            | CoreError::EmptyInput(_)
            | CoreError::Degenerate(_)
            | CoreError::TensorFormat(_) => Failure::User(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

// --- argument surface ---------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "edmcast",
    version,
    about = "Diffusion-based nowcasting pipeline: synthetic data, training, sampling, forecasting, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a synthetic cloud-field dataset (tensors + manifests).
    MakeData(cmd_make_data::MakeDataArgs),
    /// Train a model: uncond | cond | corrdiff | baseline | ae | latent.
    Train(cmd_train::TrainArgs),
    /// Draw samples from a trained denoiser.
    Sample(cmd_sample::SampleArgs),
    /// Autoregressive ensemble forecast from an initial window.
    Rollout(cmd_rollout::RolloutArgs),
    /// Score a forecast tensor against truth: metrics, spread-skill, spectra.
    Evaluate(cmd_evaluate::EvaluateArgs),
    /// Reconstruction report for a trained autoencoder.
    EvaluateAe(cmd_evaluate::EvaluateAeArgs),
    /// Rank sampler settings over the published search grid.
    Gridsearch(cmd_gridsearch::GridsearchArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
pub struct Common {
    /// Output directory; every artifact lands here.
    #[arg(long, env = "EDM_OUT")]
    out: PathBuf,
    /// Config file: `key = value` lines with [sections], or a resolved JSON dump.
    #[arg(long, env = "EDM_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for the process-wide pool (default: all cores).
    #[arg(long, env = "EDM_THREADS")]
    threads: Option<usize>,
}

impl Common {
    /// Load the config file layer and prepare the output directory.
    fn begin(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Failure::user("--threads must be >= 1"));
            }
            // Ignore the error if a pool already exists (tests call in-process).
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            cfg.set("threads", t);
        }
        std::fs::create_dir_all(&self.out)
            .map_err(|e| Failure::user(format!("cannot create --out {}: {e}", self.out.display())))?;
        Ok(cfg)
    }
}

/// Sampler knobs shared by sample/rollout. `--s-churn` is the effective
/// per-step churn factor gamma; `--s-churn-raw` is the conventional total
/// budget, i.e. gamma * num_steps, provided for configs written in that unit.
#[derive(Args, Clone)]
pub struct SamplerFlags {
    #[arg(long, env = "EDM_NUM_STEPS")]
    num_steps: Option<usize>,
    #[arg(long, env = "EDM_SIGMA_MAX")]
    sigma_max: Option<f64>,
    #[arg(long, env = "EDM_SIGMA_MIN")]
    sigma_min: Option<f64>,
    #[arg(long, env = "EDM_RHO")]
    rho: Option<f64>,
    #[arg(long, env = "EDM_S_CHURN")]
    s_churn: Option<f64>,
    #[arg(long, env = "EDM_S_CHURN_RAW")]
    s_churn_raw: Option<f64>,
    #[arg(long, env = "EDM_S_NOISE")]
    s_noise: Option<f64>,
    #[arg(long, env = "EDM_SECOND_ORDER")]
    second_order: Option<bool>,
}

impl SamplerFlags {
    fn overlay(&self, cfg: &mut RunConfig) {
        cfg.set_opt("num_steps", &self.num_steps);
        cfg.set_opt("sigma_max", &self.sigma_max);
        cfg.set_opt("sigma_min", &self.sigma_min);
        cfg.set_opt("rho", &self.rho);
        cfg.set_opt("s_churn", &self.s_churn);
        cfg.set_opt("s_churn_raw", &self.s_churn_raw);
        cfg.set_opt("s_noise", &self.s_noise);
        cfg.set_opt("second_order", &self.second_order);
    }
}

/// Build a sampling configuration from resolved settings.
pub fn resolve_sample_config(
    cfg: &RunConfig,
    seed: u64,
) -> Result<edmcast_core::sampler::SampleConfig, Failure> {
    let mut sc = edmcast_core::sampler::SampleConfig::default();
    sc.num_steps = cfg.usize_or("num_steps", sc.num_steps)?;
    sc.sigma_max = cfg.f64_or("sigma_max", sc.sigma_max)?;
    sc.sigma_min = cfg.f64_or("sigma_min", sc.sigma_min)?;
    sc.rho = cfg.f64_or("rho", sc.rho)?;
    // Effective per-step gamma wins over the raw total budget.
    sc.s_churn = match (cfg.get("s_churn"), cfg.get("s_churn_raw")) {
        (Some(_), _) => cfg.f64_or("s_churn", 0.0)?,
        (None, Some(_)) => cfg.f64_or("s_churn_raw", 0.0)? / sc.num_steps as f64,
        (None, None) => 0.0,
    };
    sc.s_noise = cfg.f64_or("s_noise", sc.s_noise)?;
    sc.second_order = cfg.bool_or("second_order", false)?;
    sc.seed = seed;
    sc.validate().map_err(|e| Failure::user(e.to_string()))?;
    Ok(sc)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are success; everything else is a user error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::MakeData(a) => cmd_make_data::run(a),
        Cmd::Train(a) => cmd_train::run(a),
        Cmd::Sample(a) => cmd_sample::run(a),
        Cmd::Rollout(a) => cmd_rollout::run(a),
        Cmd::Evaluate(a) => cmd_evaluate::run(a),
        Cmd::EvaluateAe(a) => cmd_evaluate::run_ae(a),
        Cmd::Gridsearch(a) => cmd_gridsearch::run(a),
    };
    if let Err(f) = result {
        eprintln!("edmcast: {}", f.message());
        std::process::exit(f.exit_code());
    }
}
