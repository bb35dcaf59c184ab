//! `make-data`: synthesize the toy cloud world into train/val/test tensors
//! plus JSON manifests. World physics and the acceptance filter are fully
//! configurable through `[world]` and `[filter]` config keys; the common
//! knobs are also flags.

use clap::Args;
use edmcast_core::toydata::{
    build_dataset, BlobWorldConfig, PatchFilter, SplitCounts, VelocitySpec,
};

use crate::config::RunConfig;
use crate::provenance::RunLog;
use crate::{Common, Failure};

#[derive(Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, env = "EDM_SEED")]
    seed: Option<u64>,
    /// Training sequences to keep.
    #[arg(long, env = "EDM_TRAIN")]
    train: Option<usize>,
    #[arg(long, env = "EDM_VAL")]
    val: Option<usize>,
    #[arg(long, env = "EDM_TEST")]
    test: Option<usize>,
    /// Frames per stored sequence (window + target).
    #[arg(long, env = "EDM_FRAMES_PER_SAMPLE")]
    frames_per_sample: Option<usize>,
    /// Square grid size in pixels.
    #[arg(long, env = "EDM_GRID")]
    grid: Option<usize>,
}

fn world_from(cfg: &RunConfig) -> Result<BlobWorldConfig, Failure> {
    let d = BlobWorldConfig::default();
    let velocity = match cfg.str_or("world.velocity", "uniform").as_str() {
        "uniform" => VelocitySpec::Uniform,
        "rotational" => VelocitySpec::Rotational,
        other => {
            // `fixed:vy,vx` pins the advection vector.
            let Some(rest) = other.strip_prefix("fixed:") else {
                return Err(Failure::user(format!(
                    "world.velocity `{other}` is not uniform | rotational | fixed:vy,vx"
                )));
            };
            let parts: Vec<&str> = rest.split(',').collect();
            let [vy, vx] = parts.as_slice() else {
                return Err(Failure::user("world.velocity fixed form needs `fixed:vy,vx`"));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Failure::user(format!("bad velocity component `{s}`")))
            };
            VelocitySpec::Fixed { vy: parse(vy)?, vx: parse(vx)? }
        }
    };
    Ok(BlobWorldConfig {
        grid: cfg.usize_or("world.grid", d.grid)?,
        blob_count: (
            cfg.usize_or("world.blob_min", d.blob_count.0)?,
            cfg.usize_or("world.blob_max", d.blob_count.1)?,
        ),
        velocity,
        speed: (cfg.f64_or("world.speed_min", d.speed.0)?, cfg.f64_or("world.speed_max", d.speed.1)?),
        rate_range: (
            cfg.f64_or("world.rate_min", d.rate_range.0)?,
            cfg.f64_or("world.rate_max", d.rate_range.1)?,
        ),
        frame_minutes: cfg.f64_or("world.frame_minutes", d.frame_minutes)?,
        background_k: cfg.f64_or("world.background_k", d.background_k)?,
        amplitude_k: (
            cfg.f64_or("world.amplitude_min", d.amplitude_k.0)?,
            cfg.f64_or("world.amplitude_max", d.amplitude_k.1)?,
        ),
        blob_sigma: (
            cfg.f64_or("world.sigma_min", d.blob_sigma.0)?,
            cfg.f64_or("world.sigma_max", d.blob_sigma.1)?,
        ),
        spawn_rate: cfg.f64_or("world.spawn_rate", d.spawn_rate)?,
        death_rate: cfg.f64_or("world.death_rate", d.death_rate)?,
        seed: cfg.u64_or("seed", d.seed)?,
    })
}

fn filter_from(cfg: &RunConfig) -> Result<PatchFilter, Failure> {
    let d = PatchFilter::default();
    Ok(PatchFilter {
        min_cloud_fraction: cfg.f64_or("filter.min_cloud_fraction", d.min_cloud_fraction)?,
        cloud_threshold_k: cfg.f64_or("filter.cloud_threshold_k", d.cloud_threshold_k)?,
        max_view_zenith_deg: cfg.f64_or("filter.max_view_zenith_deg", d.max_view_zenith_deg)?,
        max_solar_zenith_deg: cfg.f64_or("filter.max_solar_zenith_deg", d.max_solar_zenith_deg)?,
    })
}

pub fn run(args: MakeDataArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    cfg.set_opt("seed", &args.seed);
    cfg.set_opt("data.train", &args.train);
    cfg.set_opt("data.val", &args.val);
    cfg.set_opt("data.test", &args.test);
    cfg.set_opt("data.frames_per_sample", &args.frames_per_sample);
    cfg.set_opt("world.grid", &args.grid);

    let world = world_from(&cfg)?;
    let filter = filter_from(&cfg)?;
    let counts = SplitCounts {
        train: cfg.usize_or("data.train", 200)?,
        val: cfg.usize_or("data.val", 40)?,
        test: cfg.usize_or("data.test", 40)?,
    };
    let frames = cfg.usize_or("data.frames_per_sample", 3)?;

    let report = build_dataset(&world, &filter, &counts, frames, &args.common.out)?;

    let resolved = cfg.write_resolved(&args.common.out)?;
    let mut log = RunLog::new("make-data", &cfg.hash());
    for manifest in [&report.train_manifest, &report.val_manifest, &report.test_manifest] {
        log.add(manifest)?;
        let m = edmcast_core::manifest::DatasetManifest::load(manifest)?;
        log.add(&m.tensor_path(manifest))?;
    }
    log.add(&resolved)?;
    log.save(&args.common.out)?;
    println!(
        "make-data: {}+{}+{} sequences at {} px, rejected fractions {:?}",
        counts.train, counts.val, counts.test, world.grid, report.rejected
    );
    Ok(())
}
