//! `sample`: draw images from a trained diffusion checkpoint, conditionally
//! or not, and optionally trace a few pixels across the solver steps.

use std::path::PathBuf;

use clap::Args;
use edmcast_core::field::{denormalize, normalize, Units};
use edmcast_core::network::ConvNet;
use edmcast_core::precond::{wrap_denoiser, PrecondParams};
use edmcast_core::rng::substream;
use edmcast_core::sampler::generate;
use edmcast_core::volume::Volume;

use crate::provenance::RunLog;
use crate::tensors::{load_volume, save_stack, user_input, write_csv};
use crate::{resolve_sample_config, Common, Failure, SamplerFlags};

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint prefix written by `train`.
    #[arg(long, env = "EDM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Conditioning tensor [C,H,W]; omit for an unconditional checkpoint.
    #[arg(long, env = "EDM_CONDITION")]
    condition: Option<PathBuf>,
    /// Dataset manifest whose stats convert physical <-> normalized.
    #[arg(long, env = "EDM_STATS")]
    stats: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long, env = "EDM_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "EDM_MEMBERS")]
    members: Option<usize>,
    /// Also write trajectory.csv with per-step pixel traces.
    #[arg(long, env = "EDM_TRAJECTORY")]
    trajectory: bool,
}

pub fn run(args: SampleArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    if let Some(p) = &args.checkpoint {
        cfg.set("checkpoint", p.display());
    }
    if let Some(p) = &args.condition {
        cfg.set("condition", p.display());
    }
    if let Some(p) = &args.stats {
        cfg.set("stats", p.display());
    }
    args.sampler.overlay(&mut cfg);
    cfg.set_opt("seed", &args.seed);
    cfg.set_opt("sample.members", &args.members);
    if args.trajectory {
        cfg.set("sample.trajectory", true);
    }

    let prefix = PathBuf::from(cfg.require("checkpoint", "--checkpoint")?);
    let (net, extra) = ConvNet::load_checkpoint(&prefix).map_err(user_input)?;
    let sigma_data = extra["sigma_data"].as_f64().unwrap_or(1.0);
    let target_c = extra["target_channels"].as_u64().unwrap_or(1) as usize;
    let denoiser = wrap_denoiser(&net, PrecondParams { sigma_data })?;

    let stats = match cfg.get("stats") {
        Some(p) => Some(
            edmcast_core::manifest::DatasetManifest::load(PathBuf::from(p).as_path())
                .map_err(user_input)?
                .stats,
        ),
        None => None,
    };
    let mut cond: Option<Volume> = match cfg.get("condition") {
        Some(path) => Some(load_volume(PathBuf::from(path).as_path())?),
        None => None,
    };
    if let (Some(c), Some(s)) = (&mut cond, &stats) {
        *c = Volume::from_field(&normalize(&c.to_field(Units::Kelvin)?, s)?);
    }
    let shape = match &cond {
        Some(c) => (target_c, c.h, c.w),
        None => (
            cfg.usize_or("sample.channels", target_c)?,
            cfg.usize_or("sample.height", 64)?,
            cfg.usize_or("sample.width", 64)?,
        ),
    };

    let seed = cfg.u64_or("seed", 0)?;
    let members = cfg.usize_or("sample.members", 1)?;
    let base = resolve_sample_config(&cfg, seed)?;
    let want_traj = cfg.bool_or("sample.trajectory", false)?;

    let mut samples = Vec::with_capacity(members);
    let mut traj_rows: Vec<Vec<String>> = Vec::new();
    // Probe pixels for the trace: center and the two quarter diagonals.
    let probes = [(shape.1 / 2, shape.2 / 2), (shape.1 / 4, shape.2 / 4), (3 * shape.1 / 4, 3 * shape.2 / 4)];
    for m in 0..members {
        let mut scfg = base.clone();
        scfg.seed = substream(seed, "sample.member", m as u64);
        let (mut vol, traj) = generate(&denoiser, cond.as_ref(), shape, &scfg)?;
        if let Some(s) = &stats {
            vol = Volume::from_field(&denormalize(&vol.to_field(Units::Normalized)?, s)?);
        }
        if want_traj {
            for (step, (sigma, state)) in traj.sigmas.iter().zip(&traj.states).enumerate() {
                let mut row = vec![m.to_string(), step.to_string(), format!("{sigma:.6e}")];
                for &(py, px) in &probes {
                    row.push(format!("{:.6e}", state.plane(0)[py * state.w + px]));
                }
                traj_rows.push(row);
            }
        }
        samples.push(vol);
    }

    let out = &args.common.out;
    let samples_path = out.join("samples.edmt");
    save_stack(&samples_path, &samples)?;
    let mut log = RunLog::new("sample", &cfg.hash());
    log.add(&samples_path)?;
    if want_traj {
        let traj_path = out.join("trajectory.csv");
        write_csv(&traj_path, "member,step,sigma,center,upper_left,lower_right", &traj_rows)?;
        log.add(&traj_path)?;
    }
    let resolved = cfg.write_resolved(out)?;
    log.add(&resolved)?;
    log.save(out)?;
    println!("sample: wrote {} member(s) of shape [{},{},{}]", members, shape.0, shape.1, shape.2);
    Ok(())
}
