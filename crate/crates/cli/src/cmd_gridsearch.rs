//! `gridsearch`: sweep generation knobs for a conditional diffusion
//! checkpoint on held-out cases and pick the rank-sum winner (RMSE of the
//! ensemble mean, and spread-skill ratio closest to one).

use std::path::PathBuf;

use clap::Args;
use edmcast_core::evaluation::{
    enumerate, run_grid, spread_skill_from_samples, GridResult, GridSpec, SpreadSkillConfig,
};
use edmcast_core::forecast::{ensemble, DiffusionModel, RolloutConfig};
use edmcast_core::manifest::DatasetManifest;
use edmcast_core::network::ConvNet;
use edmcast_core::precond::{wrap_denoiser, PrecondParams};
use edmcast_core::rng::substream;
use edmcast_core::training::{load_training_set, TrainTask, TrainTaskKind};
use edmcast_core::volume::Volume;

use crate::provenance::RunLog;
use crate::tensors::{user_input, write_csv};
use crate::{resolve_sample_config, Common, Failure};

#[derive(Args)]
pub struct GridsearchArgs {
    #[command(flatten)]
    common: Common,
    /// Conditional diffusion checkpoint prefix.
    #[arg(long, env = "EDM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Validation dataset manifest; cells are scored on its first cases.
    #[arg(long, env = "EDM_DATA")]
    data: Option<PathBuf>,
    /// How many validation samples to score each cell on.
    #[arg(long, env = "EDM_CASES")]
    cases: Option<usize>,
    #[arg(long, env = "EDM_MEMBERS")]
    members: Option<usize>,
    #[arg(long, env = "EDM_SEED")]
    seed: Option<u64>,
}

pub fn run(args: GridsearchArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    if let Some(p) = &args.checkpoint {
        cfg.set("checkpoint", p.display());
    }
    if let Some(p) = &args.data {
        cfg.set("data", p.display());
    }
    cfg.set_opt("grid.cases", &args.cases);
    cfg.set_opt("grid.members", &args.members);
    cfg.set_opt("seed", &args.seed);

    let prefix = PathBuf::from(cfg.require("checkpoint", "--checkpoint")?);
    let (net, extra) = ConvNet::load_checkpoint(&prefix).map_err(user_input)?;
    let sigma_data = extra["sigma_data"].as_f64().unwrap_or(1.0);
    let denoiser = wrap_denoiser(&net, PrecondParams { sigma_data })?;

    let manifest_path = PathBuf::from(cfg.require("data", "--data")?);
    let manifest = DatasetManifest::load(&manifest_path).map_err(user_input)?;
    let task = TrainTask {
        kind: TrainTaskKind::Conditional,
        condition_channels: (manifest.frames_per_sample - 1) * manifest.channels,
        target_channels: manifest.channels,
    };
    let set = load_training_set(&manifest, &manifest_path, &task)?;
    let cases = cfg.usize_or("grid.cases", 8)?.min(set.len());
    if cases == 0 {
        return Err(Failure::user("gridsearch needs at least one validation case"));
    }
    let members = cfg.usize_or("grid.members", 4)?;
    let seed = cfg.u64_or("seed", 0)?;
    let window = manifest.frames_per_sample - 1;

    // Split each case's condition stack back into window frames.
    let mut inits: Vec<Vec<Volume>> = Vec::with_capacity(cases);
    for i in 0..cases {
        let c = &set.cond[i];
        let mut frames = Vec::with_capacity(window);
        for f in 0..window {
            let mut v = Volume::zeros(manifest.channels, c.h, c.w);
            for ch in 0..manifest.channels {
                v.plane_mut(ch).copy_from_slice(c.plane(f * manifest.channels + ch));
            }
            frames.push(v);
        }
        inits.push(frames);
    }

    let spec = GridSpec {
        num_steps: cfg.list_or("grid.num_steps", &GridSpec::default().num_steps)?,
        s_churn: cfg.list_or("grid.s_churn", &GridSpec::default().s_churn)?,
        sigma_max: cfg.list_or("grid.sigma_max", &GridSpec::default().sigma_max)?,
        rho: cfg.list_or("grid.rho", &GridSpec::default().rho)?,
    };
    let cells = enumerate(&spec)?;
    let base = resolve_sample_config(&cfg, seed)?;

    let ranking = run_grid(&cells, |cell| {
        let sample = cell.apply(&base);
        let model = DiffusionModel { denoiser: &denoiser, sample };
        let mut means: Vec<Volume> = Vec::with_capacity(cases);
        let mut store: Vec<(Vec<Volume>, Volume)> = Vec::with_capacity(cases);
        for i in 0..cases {
            let rcfg = RolloutConfig {
                leads: 1,
                window,
                members,
                base_seed: substream(seed, "grid.case", i as u64),
                clamp: None,
            };
            let ens = ensemble(&model, &inits[i], &rcfg, &format!("grid-{i}"))?;
            means.push(ens.mean(0)?);
            store.push((ens.members.iter().map(|m| m[0].clone()).collect(), set.target[i].clone()));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (mean, i) in means.iter().zip(0..cases) {
            for (p, q) in mean.data.iter().zip(&set.target[i].data) {
                sum += (p - q) * (p - q);
            }
            n += mean.data.len();
        }
        let views: Vec<(Vec<&Volume>, &Volume)> =
            store.iter().map(|(m, t)| (m.iter().collect(), t)).collect();
        let curve = spread_skill_from_samples(&views, &SpreadSkillConfig::default())?;
        Ok(GridResult { cell: *cell, rmse: (sum / n as f64).sqrt(), ratio: curve.ratio })
    })?;

    let out = &args.common.out;
    let rows: Vec<Vec<String>> = ranking
        .rows
        .iter()
        .map(|r| {
            vec![
                r.result.cell.num_steps.to_string(),
                format!("{:.6}", r.result.cell.s_churn),
                format!("{:.3}", r.result.cell.sigma_max),
                format!("{:.3}", r.result.cell.rho),
                format!("{:.6e}", r.result.rmse),
                format!("{:.6e}", r.result.ratio),
                format!("{:.1}", r.rmse_rank),
                format!("{:.1}", r.ratio_rank),
                format!("{:.1}", r.rank_sum),
            ]
        })
        .collect();
    let grid_path = out.join("grid.csv");
    write_csv(
        &grid_path,
        "num_steps,s_churn,sigma_max,rho,rmse,ratio,rmse_rank,ratio_rank,rank_sum",
        &rows,
    )?;
    let sel_path = out.join("selected.json");
    let sel = serde_json::to_string_pretty(&ranking.selected)
        .map_err(|e| Failure::internal(e.to_string()))?;
    std::fs::write(&sel_path, sel).map_err(|e| Failure::internal(e.to_string()))?;

    let resolved = cfg.write_resolved(out)?;
    let mut log = RunLog::new("gridsearch", &cfg.hash());
    log.add(&grid_path)?;
    log.add(&sel_path)?;
    log.add(&resolved)?;
    log.save(out)?;
    let s = &ranking.selected;
    println!(
        "gridsearch: {} cells on {cases} case(s), selected num_steps={} s_churn={} sigma_max={} rho={}",
        ranking.rows.len(),
        s.num_steps,
        s.s_churn,
        s.sigma_max,
        s.rho
    );
    Ok(())
}
