//! `rollout`: autoregressive ensemble forecast from an initial window.
//!
//! Models keep their training-time normalized space; tensors on disk may be
//! physical. With `--stats <manifest>` the init is normalized on the way in
//! and every forecast frame is denormalized on the way out, so files stay
//! physical while the model runs in the space it was fitted in.

use std::path::PathBuf;

use clap::Args;
use edmcast_core::autoencoder::TinyAe;
use edmcast_core::field::{denormalize, normalize, NormStats, Units};
use edmcast_core::forecast::{
    ensemble, BaselineModel, CorrDiffModel, DiffusionModel, ForecastModel, LatentModel,
    Persistence, RolloutConfig,
};
use edmcast_core::manifest::DatasetManifest;
use edmcast_core::network::ConvNet;
use edmcast_core::precond::{wrap_denoiser, PrecondParams};
use edmcast_core::tensor::write_tensor_file;
use edmcast_core::volume::Volume;

use crate::provenance::RunLog;
use crate::tensors::{load_frames, user_input};
use crate::{resolve_sample_config, Common, Failure, SamplerFlags};

#[derive(Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    /// persistence | baseline | diff | corrdiff | ldm
    #[arg(long, env = "EDM_MODEL")]
    model: Option<String>,
    /// Checkpoint prefix of the forecasting net (diff/corrdiff residual/ldm).
    #[arg(long, env = "EDM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Baseline checkpoint prefix (baseline itself, and corrdiff's mean).
    #[arg(long, env = "EDM_BASELINE")]
    baseline: Option<PathBuf>,
    /// Autoencoder checkpoint prefix (ldm only).
    #[arg(long, env = "EDM_AE")]
    ae: Option<PathBuf>,
    /// Initial window tensor, [window,H,W] or [window,C,H,W].
    #[arg(long, env = "EDM_INIT")]
    init: Option<PathBuf>,
    /// Dataset manifest whose stats convert physical <-> normalized.
    #[arg(long, env = "EDM_STATS")]
    stats: Option<PathBuf>,
    #[arg(long, env = "EDM_LEADS")]
    leads: Option<usize>,
    #[arg(long, env = "EDM_MEMBERS")]
    members: Option<usize>,
    #[arg(long, env = "EDM_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

fn to_normalized(v: &Volume, stats: &NormStats) -> Result<Volume, Failure> {
    Ok(Volume::from_field(&normalize(&v.to_field(Units::Kelvin)?, stats)?))
}

fn to_physical(v: &Volume, stats: &NormStats) -> Result<Volume, Failure> {
    Ok(Volume::from_field(&denormalize(&v.to_field(Units::Normalized)?, stats)?))
}

pub fn run(args: RolloutArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    cfg.set_opt("model", &args.model.as_deref().map(str::to_string));
    for (key, path) in [
        ("checkpoint", &args.checkpoint),
        ("baseline", &args.baseline),
        ("ae", &args.ae),
        ("init", &args.init),
        ("stats", &args.stats),
    ] {
        if let Some(p) = path {
            cfg.set(key, p.display());
        }
    }
    cfg.set_opt("rollout.leads", &args.leads);
    cfg.set_opt("rollout.members", &args.members);
    cfg.set_opt("seed", &args.seed);
    args.sampler.overlay(&mut cfg);

    let model_name = cfg.require("model", "--model")?;
    let init_path = PathBuf::from(cfg.require("init", "--init")?);
    let mut init = load_frames(&init_path)?;
    let stats: Option<NormStats> = match cfg.get("stats") {
        Some(p) => Some(
            DatasetManifest::load(PathBuf::from(p).as_path()).map_err(user_input)?.stats,
        ),
        None => None,
    };
    if let Some(s) = &stats {
        for v in &mut init {
            *v = to_normalized(v, s)?;
        }
    }

    let seed = cfg.u64_or("seed", 0)?;
    let sample = resolve_sample_config(&cfg, seed)?;
    let mut clamp = match (cfg.get("rollout.clamp_lo"), cfg.get("rollout.clamp_hi")) {
        (None, None) => None,
        _ => Some((
            cfg.f64_or("rollout.clamp_lo", f64::NEG_INFINITY)?,
            cfg.f64_or("rollout.clamp_hi", f64::INFINITY)?,
        )),
    };
    // Clamp bounds are given in the on-disk (physical) space.
    if let (Some((lo, hi)), Some(s)) = (&mut clamp, &stats) {
        let (mu, sd) = (s.mean_for(0), s.std_for(0));
        *lo = (*lo - mu) / sd;
        *hi = (*hi - mu) / sd;
    }
    let rcfg = RolloutConfig {
        leads: cfg.usize_or("rollout.leads", 18)?,
        window: init.len(),
        members: cfg.usize_or("rollout.members", 1)?,
        base_seed: seed,
        clamp,
    };

    // Load whichever pieces the chosen model needs; unused flags are ignored.
    let checkpoint: Option<(ConvNet, serde_json::Value)> = match cfg.get("checkpoint") {
        Some(p) => Some(ConvNet::load_checkpoint(PathBuf::from(p).as_path()).map_err(user_input)?),
        None => None,
    };
    let base_net: Option<ConvNet> = match cfg.get("baseline") {
        Some(p) => {
            Some(ConvNet::load_checkpoint(PathBuf::from(p).as_path()).map_err(user_input)?.0)
        }
        None => None,
    };
    let ae: Option<TinyAe> = match cfg.get("ae") {
        Some(p) => Some(TinyAe::load_checkpoint(PathBuf::from(p).as_path()).map_err(user_input)?),
        None => None,
    };
    let denoiser = match &checkpoint {
        Some((net, extra)) => {
            let sigma_data = extra["sigma_data"].as_f64().unwrap_or(1.0);
            Some(wrap_denoiser(net, PrecondParams { sigma_data })?)
        }
        None => None,
    };

    let model: Box<dyn ForecastModel> = match model_name.as_str() {
        "persistence" => Box::new(Persistence),
        "baseline" => Box::new(BaselineModel {
            net: base_net
                .as_ref()
                .ok_or_else(|| Failure::user("--model baseline needs --baseline"))?,
        }),
        "diff" => Box::new(DiffusionModel {
            denoiser: denoiser
                .as_ref()
                .ok_or_else(|| Failure::user("--model diff needs --checkpoint"))?,
            sample,
        }),
        "corrdiff" => {
            let (_, extra) = checkpoint
                .as_ref()
                .ok_or_else(|| Failure::user("--model corrdiff needs --checkpoint"))?;
            let mean = extra["residual_mean"].as_f64().ok_or_else(|| {
                Failure::user("checkpoint lacks residual stats; was it trained with --task corrdiff?")
            })?;
            let std = extra["residual_std"].as_f64().unwrap_or(1.0);
            Box::new(CorrDiffModel {
                baseline: base_net
                    .as_ref()
                    .ok_or_else(|| Failure::user("--model corrdiff needs --baseline"))?,
                residual: denoiser.as_ref().unwrap(),
                sample,
                residual_stats: NormStats::scalar(mean, std, Units::Normalized)?,
            })
        }
        "ldm" => {
            Box::new(LatentModel {
                denoiser: denoiser
                    .as_ref()
                    .ok_or_else(|| Failure::user("--model ldm needs --checkpoint"))?,
                ae: ae
                    .as_ref()
                    .ok_or_else(|| Failure::user("--model ldm needs --ae"))?,
                sample,
            })
        }
        other => {
            return Err(Failure::user(format!(
                "--model `{other}` is not persistence | baseline | diff | corrdiff | ldm"
            )))
        }
    };

    let tag = init_path.display().to_string();
    let mut ens = ensemble(model.as_ref(), &init, &rcfg, &tag)?;
    if let Some(s) = &stats {
        for member in &mut ens.members {
            for frame in member.iter_mut() {
                *frame = to_physical(frame, s)?;
            }
        }
    }

    let out = &args.common.out;
    let roll_path = out.join("rollout.edmt");
    write_tensor_file(&roll_path, &ens.to_tensor()?)?;
    let resolved = cfg.write_resolved(out)?;
    let mut log = RunLog::new("rollout", &cfg.hash());
    log.add(&roll_path)?;
    log.add(&resolved)?;
    log.save(out)?;
    println!(
        "rollout {model_name}: {} member(s) x {} lead(s) from window of {}",
        rcfg.members,
        rcfg.leads,
        init.len()
    );
    Ok(())
}
