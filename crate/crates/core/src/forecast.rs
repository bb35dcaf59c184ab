//! Autoregressive rollout and noise-seed ensembles over one-step forecast
//! models: persistence, deterministic regression, conditional diffusion, the
//! two-stage baseline+residual composite, and latent diffusion.

use crate::autoencoder::Autoencoder;
use crate::error::{CoreError, Result};
use crate::field::NormStats;
use crate::network::ConvNet;
use crate::precond::Denoiser;
use crate::rng::{sha256_hex, substream};
use crate::sampler::{generate, SampleConfig};
use crate::tensor::Tensor;
use crate::volume::Volume;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Autoregressive steps to take (three hours at ten-minute cadence).
    pub leads: usize,
    /// Condition window length in frames.
    pub window: usize,
    /// Ensemble members, differing only in RNG substream.
    pub members: usize,
    pub base_seed: u64,
    /// Clamp generated frames to this closed range before they re-enter the
    /// window. Off by default: autoregressive drift stays visible.
    pub clamp: Option<(f64, f64)>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { leads: 18, window: 2, members: 10, base_seed: 0, clamp: None }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leads == 0 {
            return Err(CoreError::InvalidArgument("leads must be >= 1".into()));
        }
        if self.window == 0 {
            return Err(CoreError::InvalidArgument("window must be >= 1".into()));
        }
        if self.members == 0 {
            return Err(CoreError::InvalidArgument("members must be >= 1".into()));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CoreError::InvalidArgument(format!(
                    "clamp range ({lo}, {hi}) must be finite and increasing"
                )));
            }
        }
        Ok(())
    }
}

/// One-step forecast: map the normalized condition window (oldest frame
/// first) to the next normalized frame. `seed` is fully derived per
/// (member, lead); deterministic models ignore it.
pub trait ForecastModel: Sync {
    fn step(&self, window: &[Volume], seed: u64) -> Result<Volume>;
}

fn concat_window(window: &[Volume]) -> Result<Volume> {
    let refs: Vec<&Volume> = window.iter().collect();
    Volume::concat_channels(&refs)
}

/// Repeats the newest window frame forever.
pub struct Persistence;

impl ForecastModel for Persistence {
    fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
        window.last().cloned().ok_or_else(|| CoreError::EmptyInput("condition window".into()))
    }
}

/// Deterministic regression net: next = F(concat(window)).
pub struct BaselineModel<'a> {
    pub net: &'a ConvNet,
}

impl ForecastModel for BaselineModel<'_> {
    fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
        self.net.forward_inference(&concat_window(window)?, 0.0)
    }
}

/// Conditional diffusion: sample the next frame given the window.
pub struct DiffusionModel<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sample: SampleConfig,
}

impl ForecastModel for DiffusionModel<'_> {
    fn step(&self, window: &[Volume], seed: u64) -> Result<Volume> {
        let cond = concat_window(window)?;
        let last = &window[window.len() - 1];
        let mut cfg = self.sample.clone();
        cfg.seed = seed;
        let (x, _) = generate(self.denoiser, Some(&cond), (last.c, last.h, last.w), &cfg)?;
        Ok(x)
    }
}

/// Two-stage composite: deterministic baseline prediction plus a sampled
/// residual correction. The residual denoiser conditions on the window with
/// the baseline prediction appended as an extra channel, and its output is
/// mapped back through the residual normalization before the add.
pub struct CorrDiffModel<'a> {
    pub baseline: &'a ConvNet,
    pub residual: &'a dyn Denoiser,
    pub sample: SampleConfig,
    pub residual_stats: NormStats,
}

impl ForecastModel for CorrDiffModel<'_> {
    fn step(&self, window: &[Volume], seed: u64) -> Result<Volume> {
        let cond0 = concat_window(window)?;
        let base = self.baseline.forward_inference(&cond0, 0.0)?;
        let cond = Volume::concat_channels(&[&cond0, &base])?;
        let mut cfg = self.sample.clone();
        cfg.seed = seed;
        let (res, _) = generate(self.residual, Some(&cond), (base.c, base.h, base.w), &cfg)?;
        let mut out = base;
        for c in 0..out.c {
            let (mu, sd) = (self.residual_stats.mean_for(c), self.residual_stats.std_for(c));
            for (o, r) in out.plane_mut(c).iter_mut().zip(res.plane(c)) {
                *o += r * sd + mu;
            }
        }
        Ok(out)
    }
}

/// Latent diffusion: window frames are encoded one by one, sampling runs in
/// latent space on their concatenated codes, the sample is decoded back.
pub struct LatentModel<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub ae: &'a dyn Autoencoder,
    pub sample: SampleConfig,
}

impl ForecastModel for LatentModel<'_> {
    fn step(&self, window: &[Volume], seed: u64) -> Result<Volume> {
        let last = window.last().ok_or_else(|| CoreError::EmptyInput("condition window".into()))?;
        let f = self.ae.compression();
        if last.h % f != 0 || last.w % f != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "frame {}x{} not divisible by compression {f}",
                last.h, last.w
            )));
        }
        let mut codes = Vec::with_capacity(window.len());
        for frame in window {
            codes.push(self.ae.encode(frame)?);
        }
        let refs: Vec<&Volume> = codes.iter().collect();
        let cond = Volume::concat_channels(&refs)?;
        let mut cfg = self.sample.clone();
        cfg.seed = seed;
        let shape = (self.ae.latent_channels(), last.h / f, last.w / f);
        let (z, _) = generate(self.denoiser, Some(&cond), shape, &cfg)?;
        self.ae.decode(&z)
    }
}

/// Seed for one ensemble member. Member m of an M-member ensemble is
/// bit-identical to `rollout` launched directly with this seed.
pub fn member_seed(base_seed: u64, member: u64) -> u64 {
    substream(base_seed, "forecast.member", member)
}

/// Roll one member forward `cfg.leads` steps. The window slides over
/// generated frames only; lead k draws its RNG from a fresh substream of
/// `seed`, so the prefix of a rollout never depends on later leads.
pub fn rollout(
    model: &dyn ForecastModel,
    init: &[Volume],
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<Vec<Volume>> {
    cfg.validate()?;
    if init.len() != cfg.window {
        return Err(CoreError::InvalidArgument(format!(
            "init window has {} frames, config wants {}",
            init.len(),
            cfg.window
        )));
    }
    for frame in init {
        if !frame.same_shape(&init[0]) {
            return Err(CoreError::ShapeMismatch("init window frames differ in shape".into()));
        }
        if !frame.is_finite() {
            return Err(CoreError::NonFinite("init window frame".into()));
        }
    }
    let mut window: Vec<Volume> = init.to_vec();
    let mut leads = Vec::with_capacity(cfg.leads);
    for k in 0..cfg.leads {
        let mut next = model.step(&window, substream(seed, "forecast.lead", k as u64))?;
        if !next.is_finite() {
            return Err(CoreError::NonFinite(format!("forecast frame at lead {k}")));
        }
        if !next.same_shape(&init[0]) {
            return Err(CoreError::ShapeMismatch(format!("model changed frame shape at lead {k}")));
        }
        if let Some((lo, hi)) = cfg.clamp {
            for v in &mut next.data {
                *v = v.clamp(lo, hi);
            }
        }
        window.remove(0);
        window.push(next.clone());
        leads.push(next);
    }
    Ok(leads)
}

/// All members of one forecast; within a member, leads run oldest to newest.
pub struct EnsembleForecast {
    pub members: Vec<Vec<Volume>>,
    pub member_seeds: Vec<u64>,
    pub config_hash: String,
    pub init_tag: String,
}

impl EnsembleForecast {
    pub fn leads(&self) -> usize {
        self.members[0].len()
    }

    /// Pixelwise ensemble mean at one lead.
    pub fn mean(&self, lead: usize) -> Result<Volume> {
        let first = &self.members[0][lead];
        let mut acc = Volume::zeros(first.c, first.h, first.w);
        for member in &self.members {
            acc.add_scaled(&member[lead], 1.0)?;
        }
        Ok(acc.scaled(1.0 / self.members.len() as f64))
    }

    pub fn means(&self) -> Result<Vec<Volume>> {
        (0..self.leads()).map(|k| self.mean(k)).collect()
    }

    /// Pack as [members, leads, H, W]; the tensor container caps rank at
    /// four, so the channel axis must be singleton and is squeezed.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let first = &self.members[0][0];
        if first.c != 1 {
            return Err(CoreError::TensorFormat(format!(
                "ensemble packing needs single-channel frames, got {}",
                first.c
            )));
        }
        let mut data = Vec::with_capacity(self.members.len() * self.leads() * first.h * first.w);
        for member in &self.members {
            for frame in member {
                data.extend(frame.data.iter().map(|&v| v as f32));
            }
        }
        Tensor::new(vec![self.members.len(), self.leads(), first.h, first.w], data)
    }
}

/// Run `cfg.members` independent rollouts. Members are embarrassingly
/// parallel and differ only in the seed substream.
pub fn ensemble(
    model: &dyn ForecastModel,
    init: &[Volume],
    cfg: &RolloutConfig,
    init_tag: &str,
) -> Result<EnsembleForecast> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.members as u64).map(|m| member_seed(cfg.base_seed, m)).collect();
    let members: Vec<Vec<Volume>> =
        seeds.par_iter().map(|&s| rollout(model, init, cfg, s)).collect::<Result<_>>()?;
    let config_hash = sha256_hex(serde_json::to_string(cfg)?.as_bytes());
    Ok(EnsembleForecast {
        members,
        member_seeds: seeds,
        config_hash,
        init_tag: init_tag.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_volume, seed_rng};
    use proptest::prelude::*;

    fn frame_from(vals: &[f64], h: usize, w: usize) -> Volume {
        let mut v = Volume::zeros(1, h, w);
        v.data.copy_from_slice(vals);
        v
    }

    fn constant(value: f64) -> Volume {
        let mut v = Volume::zeros(1, 2, 2);
        v.data.fill(value);
        v
    }

    #[test]
    fn persistence_repeats_the_newest_frame() {
        let init = [constant(1.0), constant(7.0)];
        let cfg = RolloutConfig { leads: 5, ..Default::default() };
        let leads = rollout(&Persistence, &init, &cfg, 0).unwrap();
        assert_eq!(leads.len(), 5);
        for lead in &leads {
            assert_eq!(lead.data, init[1].data);
        }
    }

    /// Circular-shift advection with an oracle model: the rollout must track
    /// the analytically advected truth bit for bit at every lead.
    #[test]
    fn oracle_advection_tracks_truth_exactly() {
        struct Shift;
        fn shifted(v: &Volume) -> Volume {
            let (h, w) = (v.h, v.w);
            let mut out = Volume::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    out.data[((y + 1) % h) * w + (x + 2) % w] = v.data[y * w + x];
                }
            }
            out
        }
        impl ForecastModel for Shift {
            fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
                Ok(shifted(window.last().unwrap()))
            }
        }
        let start = normal_volume(&mut seed_rng(3), 1, 8, 8);
        let init = [start.clone(), shifted(&start)];
        let cfg = RolloutConfig { leads: 18, ..Default::default() };
        let leads = rollout(&Shift, &init, &cfg, 0).unwrap();
        let mut truth = init[1].clone();
        for lead in &leads {
            truth = shifted(&truth);
            assert_eq!(lead.data, truth.data);
        }
    }

    #[test]
    fn window_slides_in_time_order() {
        // next = 2*newest - oldest: linear extrapolation, so constants 0,1
        // must continue 2,3,4,... only if the window slides correctly.
        struct Extrapolate;
        impl ForecastModel for Extrapolate {
            fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
                let mut out = window[1].scaled(2.0);
                out.add_scaled(&window[0], -1.0)?;
                Ok(out)
            }
        }
        let init = [constant(0.0), constant(1.0)];
        let cfg = RolloutConfig { leads: 4, ..Default::default() };
        let leads = rollout(&Extrapolate, &init, &cfg, 0).unwrap();
        for (k, lead) in leads.iter().enumerate() {
            assert_eq!(lead.data, constant(k as f64 + 2.0).data);
        }
    }

    #[test]
    fn clamp_applies_to_stored_and_fed_back_frames() {
        struct AddOne;
        impl ForecastModel for AddOne {
            fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
                let mut out = window.last().unwrap().clone();
                for v in &mut out.data {
                    *v += 1.0;
                }
                Ok(out)
            }
        }
        let init = [constant(1.0), constant(1.0)];
        let free = rollout(&AddOne, &init, &RolloutConfig { leads: 3, ..Default::default() }, 0)
            .unwrap();
        assert_eq!(free[2].data, constant(4.0).data);
        let cfg = RolloutConfig { leads: 3, clamp: Some((0.0, 1.5)), ..Default::default() };
        let clamped = rollout(&AddOne, &init, &cfg, 0).unwrap();
        for lead in &clamped {
            assert_eq!(lead.data, constant(1.5).data);
        }
    }

    #[test]
    fn non_finite_frame_aborts_with_lead_diagnostic() {
        struct BlowUpAt3;
        impl ForecastModel for BlowUpAt3 {
            fn step(&self, window: &[Volume], _seed: u64) -> Result<Volume> {
                let mut out = window.last().unwrap().clone();
                out.data[0] *= 40.0;
                if out.data[0] > 1e4 {
                    out.data[0] = f64::NAN;
                }
                Ok(out)
            }
        }
        let init = [constant(1.0), constant(1.0)];
        let cfg = RolloutConfig { leads: 18, ..Default::default() };
        let err = rollout(&BlowUpAt3, &init, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("lead 2"), "{err}");
    }

    #[test]
    fn corrdiff_with_zero_residual_sampler_equals_pure_baseline() {
        use crate::network::{Activation, ConvNetSpec};
        struct ZeroDenoiser;
        impl Denoiser for ZeroDenoiser {
            fn evaluate(&self, x: &Volume, _c: Option<&Volume>, _s: f64) -> Result<Volume> {
                Ok(Volume::zeros(x.c, x.h, x.w))
            }
        }
        let spec = ConvNetSpec {
            in_channels: 2,
            out_channels: 1,
            hidden: vec![4],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: 5,
        };
        let mut net = ConvNet::regressor(&spec).unwrap();
        // Give the zero-initialized head nonzero weights so the baseline acts.
        let mut p = net.params().data;
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.01 * ((i % 7) as f64 - 3.0);
        }
        net.set_params(&p).unwrap();

        // D == 0 telescopes the sampling ODE to exactly zero, so the
        // composite must reproduce the plain baseline bit for bit.
        let model = CorrDiffModel {
            baseline: &net,
            residual: &ZeroDenoiser,
            sample: SampleConfig { num_steps: 8, ..Default::default() },
            residual_stats: NormStats::scalar(0.0, 1.0, crate::field::Units::Normalized).unwrap(),
        };
        let init = [normal_volume(&mut seed_rng(8), 1, 6, 6), normal_volume(&mut seed_rng(9), 1, 6, 6)];
        let cfg = RolloutConfig { leads: 4, ..Default::default() };
        let composite = rollout(&model, &init, &cfg, 11).unwrap();
        let plain = rollout(&BaselineModel { net: &net }, &init, &cfg, 999).unwrap();
        for (a, b) in composite.iter().zip(&plain) {
            assert_eq!(a.data, b.data);
        }
    }

    /// Random-walk model: stochastic stand-in for a diffusion sampler.
    struct RandomWalk {
        scale: f64,
    }
    impl ForecastModel for RandomWalk {
        fn step(&self, window: &[Volume], seed: u64) -> Result<Volume> {
            let last = window.last().unwrap();
            let mut out = last.clone();
            let noise = normal_volume(&mut seed_rng(seed), last.c, last.h, last.w);
            out.add_scaled(&noise, self.scale)?;
            Ok(out)
        }
    }

    #[test]
    fn ensemble_member_matches_solo_rollout_with_member_seed() {
        let init = [constant(0.0), constant(0.0)];
        let cfg = RolloutConfig { leads: 6, members: 4, base_seed: 42, ..Default::default() };
        let ens = ensemble(&RandomWalk { scale: 1.0 }, &init, &cfg, "t0").unwrap();
        assert_eq!(ens.member_seeds.len(), 4);
        for m in 0..4 {
            let solo =
                rollout(&RandomWalk { scale: 1.0 }, &init, &cfg, member_seed(42, m as u64))
                    .unwrap();
            for (a, b) in ens.members[m].iter().zip(&solo) {
                assert_eq!(a.data, b.data);
            }
        }
    }

    #[test]
    fn single_member_mean_is_the_member() {
        let init = [constant(0.0), constant(0.0)];
        let cfg = RolloutConfig { leads: 3, members: 1, base_seed: 7, ..Default::default() };
        let ens = ensemble(&RandomWalk { scale: 1.0 }, &init, &cfg, "t0").unwrap();
        for k in 0..3 {
            assert_eq!(ens.mean(k).unwrap().data, ens.members[0][k].data);
        }
    }

    #[test]
    fn deterministic_model_gives_identical_members() {
        let init = [constant(2.0), constant(3.0)];
        let cfg = RolloutConfig { leads: 4, members: 5, base_seed: 1, ..Default::default() };
        let ens = ensemble(&Persistence, &init, &cfg, "t0").unwrap();
        for m in 1..5 {
            for k in 0..4 {
                assert_eq!(ens.members[m][k].data, ens.members[0][k].data);
            }
        }
        // Spread across members is exactly zero at every lead.
        for k in 0..4 {
            let mean = ens.mean(k).unwrap();
            for member in &ens.members {
                let diff = member[k].sub(&mean).unwrap();
                assert_eq!(diff.mean_sq(), 0.0);
            }
        }
    }

    #[test]
    fn stochastic_member_spread_grows_with_lead() {
        let init = [constant(0.0), constant(0.0)];
        let cfg =
            RolloutConfig { leads: 10, members: 8, base_seed: 3, ..Default::default() };
        let ens = ensemble(&RandomWalk { scale: 0.3 }, &init, &cfg, "t0").unwrap();
        let spread_at = |k: usize| {
            let mean = ens.mean(k).unwrap();
            ens.members
                .iter()
                .map(|m| m[k].sub(&mean).unwrap().mean_sq())
                .sum::<f64>()
                / ens.members.len() as f64
        };
        assert!(spread_at(9) > spread_at(0), "{} vs {}", spread_at(9), spread_at(0));
    }

    #[test]
    fn ensemble_tensor_layout_is_member_major() {
        let init = [constant(0.0), constant(0.0)];
        let cfg = RolloutConfig { leads: 2, members: 3, base_seed: 5, ..Default::default() };
        let ens = ensemble(&RandomWalk { scale: 1.0 }, &init, &cfg, "t0").unwrap();
        let t = ens.to_tensor().unwrap();
        assert_eq!(t.dims(), &[3, 2, 2, 2]);
        let px = ens.members[1][0].data[3];
        // member 1, lead 0, last pixel of the 2x2 frame
        assert_eq!(t.data()[1 * 2 * 4 + 3], px as f32);
        assert!(!ens.config_hash.is_empty());
        assert_eq!(ens.init_tag, "t0");
    }

    #[test]
    fn bad_configs_and_windows_are_rejected() {
        let init = [constant(0.0), constant(0.0)];
        assert!(rollout(&Persistence, &init, &RolloutConfig { leads: 0, ..Default::default() }, 0)
            .is_err());
        assert!(rollout(
            &Persistence,
            &init,
            &RolloutConfig { window: 3, ..Default::default() },
            0
        )
        .is_err());
        assert!(rollout(
            &Persistence,
            &init,
            &RolloutConfig { clamp: Some((2.0, 1.0)), ..Default::default() },
            0
        )
        .is_err());
        let bad = [constant(0.0), constant(f64::NAN)];
        assert!(rollout(&Persistence, &bad, &RolloutConfig::default(), 0).is_err());
    }

    proptest! {
        /// RMSE of the ensemble mean never exceeds the mean of member RMSEs
        /// (convexity of squared error), for any members and any truth.
        #[test]
        fn ensemble_mean_rmse_never_beats_jensen(
            seeds in proptest::collection::vec(0u64..1000, 1..6),
            truth_seed in 0u64..1000,
        ) {
            let members: Vec<Vec<Volume>> = seeds
                .iter()
                .map(|&s| vec![normal_volume(&mut seed_rng(s), 1, 4, 4)])
                .collect();
            let truth = normal_volume(&mut seed_rng(10_000 + truth_seed), 1, 4, 4);
            let ens = EnsembleForecast {
                members,
                member_seeds: seeds.clone(),
                config_hash: String::new(),
                init_tag: String::new(),
            };
            let rmse = |a: &Volume| a.sub(&truth).unwrap().mean_sq().sqrt();
            let mean_rmse = rmse(&ens.mean(0).unwrap());
            let avg_member_rmse = ens.members.iter().map(|m| rmse(&m[0])).sum::<f64>()
                / ens.members.len() as f64;
            prop_assert!(mean_rmse <= avg_member_rmse + 1e-12);
        }
    }

    #[test]
    fn frame_helper_sanity() {
        let v = frame_from(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(v.get(0, 1, 0), 3.0);
    }
}
