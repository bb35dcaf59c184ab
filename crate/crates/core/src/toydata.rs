//! Synthetic nowcasting world: cold Gaussian blobs advecting over a warm
//! periodic background, the patch-filter predicates, and the dataset builder.

use crate::error::{CoreError, Result};
use crate::field::{compute_stats, Field, Units};
use crate::manifest::{DatasetManifest, Split};
use crate::rng::{seed_rng, sha256_hex, substream, Stream};
use crate::tensor::{write_tensor_file, Tensor};
use crate::volume::Volume;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Physical brightness-temperature range; frames are clamped into it.
pub const TEMP_MIN_K: f64 = 180.0;
pub const TEMP_MAX_K: f64 = 330.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySpec {
    /// One shared velocity per sequence: speed from the configured range,
    /// direction uniform.
    Uniform,
    /// Solid-body rotation about the grid center; angular rate is
    /// speed / (grid/4), i.e. the configured speed at quarter-domain radius.
    Rotational,
    /// Pinned (vy, vx) in px/frame. Integer values advect bit-exactly, which
    /// is what the oracle-forecaster tests lean on.
    Fixed { vy: f64, vx: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobWorldConfig {
    pub grid: usize,
    /// Inclusive range of initial blob count.
    pub blob_count: (usize, usize),
    pub velocity: VelocitySpec,
    /// Speed range in px/frame (ignored by `Fixed`).
    pub speed: (f64, f64),
    /// Per-frame exponential amplitude rate range: negative decays.
    pub rate_range: (f64, f64),
    /// Nominal frame interval; metadata only.
    pub frame_minutes: f64,
    pub background_k: f64,
    /// Cold-anomaly depth range in kelvin (blobs are subtracted).
    pub amplitude_k: (f64, f64),
    /// Blob radius range in px.
    pub blob_sigma: (f64, f64),
    /// Poisson mean of new blobs per frame.
    pub spawn_rate: f64,
    /// Per-blob death probability per frame.
    pub death_rate: f64,
    pub seed: u64,
}

impl Default for BlobWorldConfig {
    fn default() -> Self {
        BlobWorldConfig {
            grid: 64,
            blob_count: (3, 6),
            velocity: VelocitySpec::Uniform,
            speed: (0.5, 1.5),
            rate_range: (-0.05, 0.05),
            frame_minutes: 10.0,
            background_k: 300.0,
            amplitude_k: (30.0, 60.0),
            blob_sigma: (4.0, 10.0),
            spawn_rate: 0.1,
            death_rate: 0.02,
            seed: 0,
        }
    }
}

impl BlobWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 16 {
            return Err(CoreError::InvalidArgument(format!("grid {} below minimum 16", self.grid)));
        }
        if self.blob_count.0 > self.blob_count.1 {
            return Err(CoreError::InvalidArgument("blob count range inverted".into()));
        }
        if !(TEMP_MIN_K..=TEMP_MAX_K).contains(&self.background_k) {
            return Err(CoreError::InvalidArgument(format!(
                "background {} K outside physical range",
                self.background_k
            )));
        }
        let (lo, hi) = self.amplitude_k;
        if !(lo > 0.0 && hi >= lo) || self.background_k - hi < TEMP_MIN_K {
            return Err(CoreError::InvalidArgument(format!(
                "amplitudes ({lo}, {hi}) K leave the physical range from {} K",
                self.background_k
            )));
        }
        if !(self.blob_sigma.0 > 0.0 && self.blob_sigma.1 >= self.blob_sigma.0) {
            return Err(CoreError::InvalidArgument("blob sigma range invalid".into()));
        }
        if self.speed.0 < 0.0 || self.speed.1 < self.speed.0 {
            return Err(CoreError::InvalidArgument("speed range invalid".into()));
        }
        if self.rate_range.0 > self.rate_range.1 {
            return Err(CoreError::InvalidArgument("rate range inverted".into()));
        }
        if self.spawn_rate < 0.0 || !(0.0..=1.0).contains(&self.death_rate) {
            return Err(CoreError::InvalidArgument("spawn/death rates invalid".into()));
        }
        Ok(())
    }

    /// Growth saturates here so cores never leave the physical range.
    fn amp_cap(&self) -> f64 {
        self.background_k - TEMP_MIN_K
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    amp: f64,
    sigma: f64,
    rate: f64,
    vy: f64,
    vx: f64,
    /// Frame index at spawn; motion and growth are measured from here.
    born: usize,
}

/// Signed wrap of a coordinate difference onto [-n/2, n/2).
fn wrap(d: f64, n: f64) -> f64 {
    let r = d.rem_euclid(n);
    if r >= n / 2.0 {
        r - n
    } else {
        r
    }
}

fn spawn_blob(cfg: &BlobWorldConfig, rng: &mut Stream, velocity: (f64, f64), born: usize) -> Blob {
    let n = cfg.grid as f64;
    let (cy, cx) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
    let amp = rng.gen_range(cfg.amplitude_k.0..=cfg.amplitude_k.1);
    let sigma = rng.gen_range(cfg.blob_sigma.0..=cfg.blob_sigma.1);
    let rate = rng.gen_range(cfg.rate_range.0..=cfg.rate_range.1);
    Blob { cy, cx, amp, sigma, rate, vy: velocity.0, vx: velocity.1, born }
}

fn render_frame(cfg: &BlobWorldConfig, blobs: &[Blob], frame: usize) -> Volume {
    let n = cfg.grid;
    let mut out = Volume::zeros(1, n, n);
    out.data.fill(cfg.background_k);
    let omega_center = (n as f64 / 2.0, n as f64 / 2.0);
    for b in blobs {
        let age = (frame - b.born) as f64;
        let amp = (b.amp * (b.rate * age).exp()).min(cfg.amp_cap());
        // Position is evaluated as (pixel - displacement) - origin so that
        // integer velocities reproduce a circular shift bit for bit.
        let (dy_off, dx_off, cy, cx) = match cfg.velocity {
            VelocitySpec::Rotational => {
                let omega = b.vy; // stored angular rate
                let (sin, cos) = (omega * age).sin_cos();
                let (oy, ox) = (b.cy - omega_center.0, b.cx - omega_center.1);
                (
                    0.0,
                    0.0,
                    omega_center.0 + oy * cos - ox * sin,
                    omega_center.1 + oy * sin + ox * cos,
                )
            }
            _ => (b.vy * age, b.vx * age, b.cy, b.cx),
        };
        for y in 0..n {
            let dy = wrap(y as f64 - dy_off - cy, n as f64);
            for x in 0..n {
                let dx = wrap(x as f64 - dx_off - cx, n as f64);
                let r2 = dy * dy + dx * dx;
                out.data[y * n + x] -= amp * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
            }
        }
    }
    for v in &mut out.data {
        *v = v.clamp(TEMP_MIN_K, TEMP_MAX_K);
    }
    out
}

/// One deterministic sequence of kelvin frames at the configured cadence.
pub fn generate_sequence(cfg: &BlobWorldConfig, length: usize) -> Result<Vec<Field>> {
    cfg.validate()?;
    if length < 3 {
        return Err(CoreError::InvalidArgument(format!(
            "sequence length {length} below minimum 3 (two conditions + target)"
        )));
    }
    let mut rng = seed_rng(substream(cfg.seed, "toydata.sequence", 0));
    let shared_velocity = match cfg.velocity {
        VelocitySpec::Uniform => {
            let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            (speed * dir.sin(), speed * dir.cos())
        }
        VelocitySpec::Rotational => {
            // angular rate stored in the vy slot
            (rng.gen_range(cfg.speed.0..=cfg.speed.1) / (cfg.grid as f64 / 4.0), 0.0)
        }
        VelocitySpec::Fixed { vy, vx } => (vy, vx),
    };
    let count = rng.gen_range(cfg.blob_count.0..=cfg.blob_count.1);
    let mut blobs: Vec<Blob> =
        (0..count).map(|_| spawn_blob(cfg, &mut rng, shared_velocity, 0)).collect();

    let mut frames = Vec::with_capacity(length);
    for k in 0..length {
        if k > 0 {
            // Poisson clock: geometric deaths, Poisson spawns.
            if cfg.death_rate > 0.0 {
                blobs.retain(|_| rng.gen_range(0.0..1.0) >= cfg.death_rate);
            }
            if cfg.spawn_rate > 0.0 {
                let births = Poisson::new(cfg.spawn_rate)
                    .map_err(|e| CoreError::InvalidArgument(e.to_string()))?
                    .sample(&mut rng) as usize;
                for _ in 0..births {
                    blobs.push(spawn_blob(cfg, &mut rng, shared_velocity, k));
                }
            }
        }
        frames.push(render_frame(cfg, &blobs, k).to_field(Units::Kelvin)?);
    }
    Ok(frames)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchFilter {
    /// Keep patches whose cold fraction reaches this.
    pub min_cloud_fraction: f64,
    /// Pixels strictly colder than this count as cloud.
    pub cloud_threshold_k: f64,
    /// Viewing-zenith cut in degrees; toy frames carry no geometry, so the
    /// predicate always passes. Kept for the real-data reader interface.
    pub max_view_zenith_deg: f64,
    /// Solar-zenith cut in degrees; inert for toy data like the above.
    pub max_solar_zenith_deg: f64,
}

impl Default for PatchFilter {
    fn default() -> Self {
        PatchFilter {
            min_cloud_fraction: 0.10,
            cloud_threshold_k: 273.0,
            max_view_zenith_deg: 65.0,
            max_solar_zenith_deg: 85.0,
        }
    }
}

impl PatchFilter {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_cloud_fraction) {
            return Err(CoreError::InvalidArgument(format!(
                "cloud fraction {} outside [0,1]",
                self.min_cloud_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FilterReport {
    pub accept: bool,
    pub cloud_fraction: f64,
    pub view_zenith_ok: bool,
    pub solar_zenith_ok: bool,
}

pub fn apply_filter(frame: &Field, filter: &PatchFilter) -> Result<FilterReport> {
    filter.validate()?;
    if frame.units() != Units::Kelvin {
        return Err(CoreError::UnitMismatch {
            expected: Units::Kelvin,
            got: frame.units(),
        });
    }
    let cold =
        frame.values().iter().filter(|&&v| (v as f64) < filter.cloud_threshold_k).count();
    let cloud_fraction = cold as f64 / frame.values().len() as f64;
    Ok(FilterReport {
        accept: cloud_fraction >= filter.min_cloud_fraction,
        cloud_fraction,
        view_zenith_ok: true,
        solar_zenith_ok: true,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BuildReport {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub rejected: [f64; 3],
}

/// A candidate sequence keyed by (split, index): pure function of the config,
/// so batches can be generated in parallel and scanned in order.
fn candidate(cfg: &BlobWorldConfig, split: Split, index: u64, frames: usize) -> Result<Vec<Field>> {
    let label = format!("toydata.split.{split}");
    let mut sub = cfg.clone();
    sub.seed = substream(cfg.seed, &label, index);
    generate_sequence(&sub, frames)
}

fn sequence_to_sample(frames: &[Field]) -> Result<Field> {
    // One sample = one field whose channel axis is time.
    let mut data = Vec::new();
    for f in frames {
        data.extend_from_slice(f.values());
    }
    Field::new(frames.len(), frames[0].height(), frames[0].width(), Units::Kelvin, data)
}

fn accepted_samples(
    cfg: &BlobWorldConfig,
    filter: &PatchFilter,
    split: Split,
    want: usize,
    frames: usize,
) -> Result<(Vec<Field>, f64)> {
    let mut accepted = Vec::with_capacity(want);
    let mut attempted = 0u64;
    let cap = 50 * want as u64 + 100;
    while accepted.len() < want {
        if attempted >= cap {
            return Err(CoreError::Degenerate(format!(
                "{split} split: filter rejected {} of {attempted} candidates; loosen the filter",
                attempted - accepted.len() as u64
            )));
        }
        let batch = ((want - accepted.len()) as u64 * 2).min(cap - attempted).max(1);
        let candidates: Vec<(Vec<Field>, bool)> = (attempted..attempted + batch)
            .into_par_iter()
            .map(|i| {
                let seq = candidate(cfg, split, i, frames)?;
                let mut keep = true;
                for f in &seq {
                    keep &= apply_filter(f, filter)?.accept;
                }
                Ok((seq, keep))
            })
            .collect::<Result<_>>()?;
        attempted += batch;
        for (seq, keep) in candidates {
            if keep && accepted.len() < want {
                accepted.push(sequence_to_sample(&seq)?);
            }
        }
    }
    let rejected = 1.0 - want as f64 / attempted as f64;
    Ok((accepted, rejected))
}

/// Generate filtered train/val/test splits from disjoint seed epochs, write
/// one tensor + manifest pair per split, and stamp the *training* stats into
/// every manifest.
pub fn build_dataset(
    cfg: &BlobWorldConfig,
    filter: &PatchFilter,
    counts: &SplitCounts,
    frames_per_sample: usize,
    out_dir: &Path,
) -> Result<BuildReport> {
    cfg.validate()?;
    filter.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(CoreError::InvalidArgument("every split needs at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let source = format!(
        "blob-world {}",
        &sha256_hex(serde_json::to_string(cfg)?.as_bytes())[..12]
    );

    let splits = [
        (Split::Train, counts.train),
        (Split::Val, counts.val),
        (Split::Test, counts.test),
    ];
    let mut stats = None;
    let mut rejected = [0.0; 3];
    let mut paths = Vec::new();
    for (i, (split, want)) in splits.iter().enumerate() {
        let (samples, rej) = accepted_samples(cfg, filter, *split, *want, frames_per_sample)?;
        rejected[i] = rej;
        if *split == Split::Train {
            stats = Some(compute_stats(&samples)?);
        }
        let tensor = Tensor::from_batch(&samples)?;
        let tensor_file = format!("{split}.edmt");
        write_tensor_file(&out_dir.join(&tensor_file), &tensor)?;
        let manifest = DatasetManifest {
            count: *want,
            frames_per_sample,
            channels: 1,
            height: cfg.grid,
            width: cfg.grid,
            units: Units::Kelvin,
            stats: stats.clone().expect("train split runs first"),
            split: *split,
            source: source.clone(),
            tensor_file,
            rejected_fraction: rej,
        };
        let path = out_dir.join(format!("{split}.json"));
        manifest.save(&path)?;
        paths.push(path);
    }
    Ok(BuildReport {
        train_manifest: paths.remove(0),
        val_manifest: paths.remove(0),
        test_manifest: paths.remove(0),
        rejected,
    })
}
