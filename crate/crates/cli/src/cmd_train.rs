//! `train`: fit one model on a dataset manifest and checkpoint it together
//! with a loss-curve CSV. Tasks:
//!   uncond   - diffusion over single frames, no conditioning
//!   cond     - diffusion over the next frame given the window
//!   baseline - deterministic regression window -> next frame
//!   corrdiff - diffusion over (truth - baseline) residuals (needs --baseline)
//!   ae       - compact autoencoder on single frames
//!   latent   - conditional diffusion inside a trained codec (needs --ae)

use std::path::{Path, PathBuf};

use clap::Args;
use edmcast_core::adam::AdamConfig;
use edmcast_core::autoencoder::{train_autoencoder, Autoencoder, TinyAe, TinyAeSpec};
use edmcast_core::manifest::DatasetManifest;
use edmcast_core::network::{Activation, ConvNetSpec};
use edmcast_core::precond::PrecondParams;
use edmcast_core::schedule::{SigmaDistKind, TrainSigmaDist};
use edmcast_core::training::{
    corrdiff_training_set, load_training_set, train_baseline, train_diffusion, DiffusionSetup,
    LossWeighting, TrainConfig, TrainReport, TrainTask, TrainTaskKind, TrainingSet,
};
use edmcast_core::volume::Volume;

use crate::config::RunConfig;
use crate::provenance::RunLog;
use crate::tensors::write_csv;
use crate::{Common, Failure};

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// uncond | cond | corrdiff | baseline | ae | latent
    #[arg(long, env = "EDM_TASK")]
    task: Option<String>,
    /// Training dataset manifest (JSON written by make-data).
    #[arg(long, env = "EDM_DATA")]
    data: Option<PathBuf>,
    /// Baseline checkpoint prefix; required for --task corrdiff.
    #[arg(long, env = "EDM_BASELINE")]
    baseline: Option<PathBuf>,
    /// Autoencoder checkpoint prefix; required for --task latent.
    #[arg(long, env = "EDM_AE")]
    ae: Option<PathBuf>,
    #[arg(long, env = "EDM_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "EDM_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "EDM_LR")]
    lr: Option<f64>,
    #[arg(long, env = "EDM_SEED")]
    seed: Option<u64>,
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let weighting = match cfg.str_or("train.weighting", "edm").as_str() {
        "edm" => LossWeighting::Edm,
        "uniform" => LossWeighting::Uniform,
        "inverse_sigma" => LossWeighting::InverseSigma,
        other => {
            return Err(Failure::user(format!(
                "train.weighting `{other}` is not edm | uniform | inverse_sigma"
            )))
        }
    };
    Ok(TrainConfig {
        epochs: cfg.usize_or("train.epochs", d.epochs)?,
        batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
        accum_factor: cfg.usize_or("train.accum_factor", d.accum_factor)?,
        weighting,
        patience: cfg.usize_or("train.patience", d.patience)?,
        val_fraction: cfg.f64_or("train.val_fraction", d.val_fraction)?,
        seed: cfg.u64_or("seed", d.seed)?,
        adam: AdamConfig { lr: cfg.f64_or("train.lr", d.adam.lr)?, ..d.adam },
    })
}

fn activation_from(name: &str) -> Result<Activation, Failure> {
    match name {
        "silu" => Ok(Activation::Silu),
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        other => Err(Failure::user(format!("net.activation `{other}` is not silu | relu | identity"))),
    }
}

fn net_spec(cfg: &RunConfig, in_c: usize, out_c: usize) -> Result<ConvNetSpec, Failure> {
    Ok(ConvNetSpec {
        in_channels: in_c,
        out_channels: out_c,
        hidden: cfg.list_or("net.hidden", &[16usize, 16])?,
        downsample_depth: cfg.usize_or("net.downsample_depth", 0)?,
        activation: activation_from(&cfg.str_or("net.activation", "silu"))?,
        param_seed: cfg.u64_or("net.param_seed", 1)?,
    })
}

fn sigma_dist(cfg: &RunConfig) -> Result<TrainSigmaDist, Failure> {
    let d = TrainSigmaDist::default();
    let kind = match cfg.str_or("train_sigma.kind", "lognormal").as_str() {
        "lognormal" => SigmaDistKind::LogNormal,
        "loguniform" => SigmaDistKind::LogUniform,
        other => {
            return Err(Failure::user(format!(
                "train_sigma.kind `{other}` is not lognormal | loguniform"
            )))
        }
    };
    Ok(TrainSigmaDist {
        kind,
        loc: cfg.f64_or("train_sigma.loc", d.loc)?,
        scale: cfg.f64_or("train_sigma.scale", d.scale)?,
        clamp: (cfg.f64_or("train_sigma.min", d.clamp.0)?, cfg.f64_or("train_sigma.max", d.clamp.1)?),
    })
}

fn write_curve(out: &Path, report: &TrainReport) -> Result<PathBuf, Failure> {
    let path = out.join("loss_curve.csv");
    let rows: Vec<Vec<String>> = report
        .curve
        .iter()
        .map(|e| vec![e.epoch.to_string(), format!("{:.8}", e.train_loss), format!("{:.8}", e.val_loss)])
        .collect();
    write_csv(&path, "epoch,train_loss,val_loss", &rows)?;
    Ok(path)
}

/// Split every frame of every sample into single-frame volumes for the codec.
fn frame_pool(set: &TrainingSet, channels: usize) -> Vec<Volume> {
    let mut all = Vec::new();
    for v in set.cond.iter().chain(&set.target) {
        for f in 0..(v.c / channels) {
            let mut out = Volume::zeros(channels, v.h, v.w);
            for c in 0..channels {
                out.plane_mut(c).copy_from_slice(v.plane(f * channels + c));
            }
            all.push(out);
        }
    }
    all
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    cfg.set_opt("task", &args.task.as_deref().map(str::to_string));
    if let Some(p) = &args.data {
        cfg.set("data", p.display());
    }
    if let Some(p) = &args.baseline {
        cfg.set("baseline", p.display());
    }
    if let Some(p) = &args.ae {
        cfg.set("ae", p.display());
    }
    cfg.set_opt("train.epochs", &args.epochs);
    cfg.set_opt("train.batch_size", &args.batch_size);
    cfg.set_opt("train.lr", &args.lr);
    cfg.set_opt("seed", &args.seed);

    let task_name = cfg.require("task", "--task")?;
    let manifest_path = PathBuf::from(cfg.require("data", "--data")?);
    let manifest = DatasetManifest::load(&manifest_path).map_err(crate::tensors::user_input)?;
    let per_sample = manifest.frames_per_sample * manifest.channels;
    let tcfg = train_config(&cfg)?;
    let pp = PrecondParams { sigma_data: cfg.f64_or("sigma_data", 1.0)? };
    let out = &args.common.out;
    let prefix = out.join("model");

    // Conditional window -> next-frame split shared by most tasks.
    let cond_task = TrainTask {
        kind: TrainTaskKind::Conditional,
        condition_channels: per_sample - manifest.channels,
        target_channels: manifest.channels,
    };

    let mut extra = serde_json::json!({
        "task": task_name,
        "sigma_data": pp.sigma_data,
        "data_mean": manifest.stats.mean_for(0),
        "data_std": manifest.stats.std_for(0),
        "condition_channels": cond_task.condition_channels,
        "target_channels": cond_task.target_channels,
    });

    let report = match task_name.as_str() {
        "baseline" => {
            let set = load_training_set(&manifest, &manifest_path, &cond_task)?;
            let spec = net_spec(&cfg, cond_task.condition_channels, cond_task.target_channels)?;
            let (net, report) = train_baseline(&set, &spec, &tcfg)?;
            net.save_checkpoint(&prefix, extra)?;
            report
        }
        "cond" => {
            let set = load_training_set(&manifest, &manifest_path, &cond_task)?;
            let spec = net_spec(
                &cfg,
                cond_task.condition_channels + cond_task.target_channels,
                cond_task.target_channels,
            )?;
            let setup = DiffusionSetup { net_spec: spec, precond: pp, sigma_dist: sigma_dist(&cfg)? };
            let (net, report) = train_diffusion(&set, &setup, &tcfg)?;
            net.save_checkpoint(&prefix, extra)?;
            report
        }
        "uncond" => {
            let task = TrainTask {
                kind: TrainTaskKind::Unconditional,
                condition_channels: 0,
                target_channels: manifest.channels,
            };
            let set = load_training_set(&manifest, &manifest_path, &task)?;
            let spec = net_spec(&cfg, manifest.channels, manifest.channels)?;
            let setup = DiffusionSetup { net_spec: spec, precond: pp, sigma_dist: sigma_dist(&cfg)? };
            let (net, report) = train_diffusion(&set, &setup, &tcfg)?;
            extra["condition_channels"] = 0.into();
            net.save_checkpoint(&prefix, extra)?;
            report
        }
        "corrdiff" => {
            let base_prefix = PathBuf::from(cfg.require("baseline", "--baseline")?);
            let (base_net, _) = edmcast_core::network::ConvNet::load_checkpoint(&base_prefix)
                .map_err(crate::tensors::user_input)?;
            let set = load_training_set(&manifest, &manifest_path, &cond_task)?;
            let (res_set, res_stats) = corrdiff_training_set(&set, &base_net)?;
            let spec = net_spec(
                &cfg,
                // window + baseline prediction + noisy residual
                cond_task.condition_channels + 2 * cond_task.target_channels,
                cond_task.target_channels,
            )?;
            let setup = DiffusionSetup { net_spec: spec, precond: pp, sigma_dist: sigma_dist(&cfg)? };
            let (net, report) = train_diffusion(&res_set, &setup, &tcfg)?;
            extra["residual_mean"] = res_stats.mean_for(0).into();
            extra["residual_std"] = res_stats.std_for(0).into();
            net.save_checkpoint(&prefix, extra)?;
            report
        }
        "ae" => {
            let set = load_training_set(&manifest, &manifest_path, &cond_task)?;
            let frames = frame_pool(&set, manifest.channels);
            let spec = TinyAeSpec {
                data_channels: manifest.channels,
                compression: cfg.usize_or("ae.compression", 2)?,
                latent_channels: cfg.usize_or("ae.latent_channels", 4)?,
                hidden: cfg.list_or("ae.hidden", &[8usize])?,
                activation: activation_from(&cfg.str_or("ae.activation", "silu"))?,
                param_seed: cfg.u64_or("net.param_seed", 1)?,
                variational: cfg.bool_or("ae.variational", false)?,
                kl_weight: cfg.f64_or("ae.kl_weight", 1e-3)?,
            };
            let (ae, report) = train_autoencoder(&frames, &spec, &tcfg)?;
            ae.save_checkpoint(&prefix)?;
            report
        }
        "latent" => {
            let ae_prefix = PathBuf::from(cfg.require("ae", "--ae")?);
            let ae = TinyAe::load_checkpoint(&ae_prefix).map_err(crate::tensors::user_input)?;
            let set = load_training_set(&manifest, &manifest_path, &cond_task)?;
            let frames = manifest.frames_per_sample - 1;
            let mut cond = Vec::with_capacity(set.len());
            let mut target = Vec::with_capacity(set.len());
            for i in 0..set.len() {
                let cv = &set.cond[i];
                let mut codes = Vec::with_capacity(frames);
                for f in 0..frames {
                    let mut frame = Volume::zeros(manifest.channels, cv.h, cv.w);
                    for c in 0..manifest.channels {
                        frame.plane_mut(c).copy_from_slice(cv.plane(f * manifest.channels + c));
                    }
                    codes.push(ae.encode(&frame)?);
                }
                let refs: Vec<&Volume> = codes.iter().collect();
                cond.push(Volume::concat_channels(&refs)?);
                target.push(ae.encode(&set.target[i])?);
            }
            // The codec's latent scale replaces data normalization.
            let rms = (target.iter().map(Volume::mean_sq).sum::<f64>() / target.len() as f64).sqrt();
            let lat_set = TrainingSet { cond, target };
            let lat_pp = PrecondParams { sigma_data: rms };
            let spec = net_spec(
                &cfg,
                (frames + 1) * ae.latent_channels(),
                ae.latent_channels(),
            )?;
            let setup =
                DiffusionSetup { net_spec: spec, precond: lat_pp, sigma_dist: sigma_dist(&cfg)? };
            let (net, report) = train_diffusion(&lat_set, &setup, &tcfg)?;
            extra["sigma_data"] = rms.into();
            net.save_checkpoint(&prefix, extra)?;
            report
        }
        other => {
            return Err(Failure::user(format!(
                "--task `{other}` is not uncond | cond | corrdiff | baseline | ae | latent"
            )))
        }
    };

    let curve_path = write_curve(out, &report)?;
    let resolved = cfg.write_resolved(out)?;
    let mut log = RunLog::new("train", &cfg.hash());
    for entry in std::fs::read_dir(out).map_err(|e| Failure::internal(e.to_string()))? {
        let path = entry.map_err(|e| Failure::internal(e.to_string()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("model") {
            log.add(&path)?;
        }
    }
    log.add(&curve_path)?;
    log.add(&resolved)?;
    log.save(out)?;
    println!(
        "train {task_name}: best val loss {:.6} at epoch {}, stopped early: {}",
        report.best_val_loss, report.best_epoch, report.stopped_early
    );
    Ok(())
}
