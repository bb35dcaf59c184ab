//! `evaluate`: score a stored ensemble forecast against truth frames and
//! emit the standard report set: per-lead deterministic metrics of the
//! ensemble mean, a spread-skill table, a last-lead spectrum comparison, and
//! grayscale panels. `evaluate-ae` scores an autoencoder round trip.

use std::path::PathBuf;

use clap::Args;
use edmcast_core::autoencoder::{evaluate_reconstruction, TinyAe};
use edmcast_core::evaluation::{
    fractional_change, pixel_metrics, spread_skill_from_samples, SpectrumConfig,
    SpreadSkillConfig,
};
use edmcast_core::manifest::DatasetManifest;
use edmcast_core::training::{load_training_set, TrainTask, TrainTaskKind};
use edmcast_core::volume::Volume;

use crate::pgm::write_pgm;
use crate::provenance::RunLog;
use crate::tensors::{load_frames, load_member_frames, user_input, write_csv};
use crate::{Common, Failure};

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Forecast tensor [members,leads,H,W] (or [leads,H,W] for one member).
    #[arg(long, env = "EDM_FORECAST")]
    forecast: Option<PathBuf>,
    /// Truth tensor [leads,H,W] aligned with the forecast leads.
    #[arg(long, env = "EDM_TRUTH")]
    truth: Option<PathBuf>,
    /// Model name for the CSV rows.
    #[arg(long, env = "EDM_LABEL")]
    label: Option<String>,
}

#[derive(Args)]
pub struct EvaluateAeArgs {
    #[command(flatten)]
    common: Common,
    /// Autoencoder checkpoint prefix.
    #[arg(long, env = "EDM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Dataset manifest; reconstruction runs over its target frames.
    #[arg(long, env = "EDM_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "EDM_LABEL")]
    label: Option<String>,
}

fn ensemble_mean(members: &[Vec<Volume>], lead: usize) -> Volume {
    let mut acc = members[0][lead].clone();
    for m in &members[1..] {
        for (a, b) in acc.data.iter_mut().zip(&m[lead].data) {
            *a += b;
        }
    }
    let n = members.len() as f64;
    for a in &mut acc.data {
        *a /= n;
    }
    acc
}

pub fn run(args: EvaluateArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    if let Some(p) = &args.forecast {
        cfg.set("forecast", p.display());
    }
    if let Some(p) = &args.truth {
        cfg.set("truth", p.display());
    }
    cfg.set_opt("label", &args.label.as_deref().map(str::to_string));

    let members = load_member_frames(PathBuf::from(cfg.require("forecast", "--forecast")?).as_path())?;
    let truth = load_frames(PathBuf::from(cfg.require("truth", "--truth")?).as_path())?;
    let label = cfg.str_or("label", "forecast");
    let leads = truth.len();
    if members.iter().any(|m| m.len() != leads) {
        return Err(Failure::user(format!(
            "forecast has {} leads but truth has {leads}",
            members[0].len()
        )));
    }
    let frame_minutes = cfg.f64_or("evaluate.frame_minutes", 10.0)?;
    let pixel_km = cfg.f64_or("evaluate.pixel_km", 2.0)?;
    let out = &args.common.out;
    let mut log = RunLog::new("evaluate", &cfg.hash());

    // Deterministic metrics of the ensemble mean, one row per lead.
    let mut rows = Vec::with_capacity(leads);
    for lead in 0..leads {
        let mean = ensemble_mean(&members, lead);
        let m = pixel_metrics(&[truth[lead].clone()], &[mean])?;
        rows.push(vec![
            label.clone(),
            format!("{:.0}", (lead + 1) as f64 * frame_minutes),
            format!("{:.6e}", m.me),
            format!("{:.6e}", m.mae),
            format!("{:.6e}", m.rmse),
        ]);
    }
    let metrics_path = out.join("metrics.csv");
    write_csv(&metrics_path, "model,lead_min,me,mae,rmse", &rows)?;
    log.add(&metrics_path)?;

    // Spread-skill per lead plus a pooled row; needs >= 2 members.
    if members.len() > 1 {
        let sscfg = SpreadSkillConfig::default();
        let mut rows = Vec::with_capacity(leads + 1);
        let mut pooled: Vec<(Vec<&Volume>, &Volume)> = Vec::new();
        for lead in 0..leads {
            let sample: Vec<(Vec<&Volume>, &Volume)> =
                vec![(members.iter().map(|m| &m[lead]).collect(), &truth[lead])];
            let c = spread_skill_from_samples(&sample, &SpreadSkillConfig { bins: 1, ..sscfg })?;
            rows.push(vec![
                format!("{:.0}", (lead + 1) as f64 * frame_minutes),
                format!("{:.6e}", c.mean_spread),
                format!("{:.6e}", c.mean_skill),
                format!("{:.6e}", c.ratio),
            ]);
            pooled.push((members.iter().map(|m| &m[lead]).collect(), &truth[lead]));
        }
        let overall = spread_skill_from_samples(&pooled, &sscfg)?;
        rows.push(vec![
            "all".into(),
            format!("{:.6e}", overall.mean_spread),
            format!("{:.6e}", overall.mean_skill),
            format!("{:.6e}", overall.ratio),
        ]);
        let ss_path = out.join("spread_skill.csv");
        write_csv(&ss_path, "lead_min,spread,skill,ratio", &rows)?;
        log.add(&ss_path)?;
    }

    // Spectrum at the last lead: truth power, ensemble-mean power, ratio.
    {
        let spcfg = SpectrumConfig { pixel_km, ..SpectrumConfig::default() };
        let mean = ensemble_mean(&members, leads - 1);
        let frac = fractional_change(&mean, &truth[leads - 1], &spcfg)?;
        let tr = edmcast_core::evaluation::radial_spectrum(&truth[leads - 1], &spcfg)?;
        let fc = edmcast_core::evaluation::radial_spectrum(&mean, &spcfg)?;
        let ratios = frac.fractional.unwrap_or_default();
        let rows: Vec<Vec<String>> = (0..tr.power.len())
            .map(|i| {
                vec![
                    format!("{:.3}", tr.wavelength_km[i]),
                    format!("{:.6e}", tr.power[i]),
                    format!("{:.6e}", fc.power[i]),
                    format!("{:.6e}", ratios[i]),
                ]
            })
            .collect();
        let sp_path = out.join("spectrum.csv");
        write_csv(&sp_path, "wavelength_km,truth_power,forecast_power,fractional", &rows)?;
        log.add(&sp_path)?;
    }

    // Qualitative panels at the first, middle, and last lead.
    {
        let pgm_dir = out.join("pgm");
        std::fs::create_dir_all(&pgm_dir).map_err(|e| Failure::internal(e.to_string()))?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in &truth {
            for &v in &t.data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        for lead in [0, leads / 2, leads - 1] {
            let mean = ensemble_mean(&members, lead);
            let min = (lead + 1) as f64 * frame_minutes;
            for (tag, vol) in
                [("truth", &truth[lead]), ("mean", &mean), ("member0", &members[0][lead])]
            {
                let path = pgm_dir.join(format!("{label}_{tag}_lead{min:03.0}.pgm"));
                write_pgm(&path, vol, 0, lo, hi)?;
                log.add(&path)?;
            }
        }
    }

    let resolved = cfg.write_resolved(out)?;
    log.add(&resolved)?;
    log.save(out)?;
    println!("evaluate {label}: {leads} lead(s), {} member(s)", members.len());
    Ok(())
}

pub fn run_ae(args: EvaluateAeArgs) -> Result<(), Failure> {
    let mut cfg = args.common.begin()?;
    if let Some(p) = &args.checkpoint {
        cfg.set("checkpoint", p.display());
    }
    if let Some(p) = &args.data {
        cfg.set("data", p.display());
    }
    cfg.set_opt("label", &args.label.as_deref().map(str::to_string));

    let ae = TinyAe::load_checkpoint(PathBuf::from(cfg.require("checkpoint", "--checkpoint")?).as_path())
        .map_err(user_input)?;
    let manifest_path = PathBuf::from(cfg.require("data", "--data")?);
    let manifest = DatasetManifest::load(&manifest_path).map_err(user_input)?;
    let task = TrainTask {
        kind: TrainTaskKind::Conditional,
        condition_channels: (manifest.frames_per_sample - 1) * manifest.channels,
        target_channels: manifest.channels,
    };
    let set = load_training_set(&manifest, &manifest_path, &task)?;
    let report = evaluate_reconstruction(&ae, &set.target)?;
    let label = cfg.str_or("label", "ae");

    let out = &args.common.out;
    let path = out.join("ae_report.csv");
    write_csv(
        &path,
        "model,bias,mae,rmse",
        &[vec![
            label.clone(),
            format!("{:.6e}", report.bias),
            format!("{:.6e}", report.mae),
            format!("{:.6e}", report.rmse),
        ]],
    )?;
    let resolved = cfg.write_resolved(out)?;
    let mut log = RunLog::new("evaluate-ae", &cfg.hash());
    log.add(&path)?;
    log.add(&resolved)?;
    log.save(out)?;
    println!("evaluate-ae {label}: rmse {:.6} over {} image(s)", report.rmse, report.images);
    Ok(())
}
