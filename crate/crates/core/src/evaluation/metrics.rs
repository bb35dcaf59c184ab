//! Pixelwise forecast metrics and the spread–skill reliability curve.

use crate::error::{CoreError, Result};
use crate::forecast::EnsembleForecast;
use crate::volume::Volume;
use serde::Serialize;

/// Relative FP slack for the mathematically guaranteed inequalities
/// (MAE >= |ME|, RMSE >= MAE). Violations beyond this mean a pooling bug.
const INEQUALITY_SLACK: f64 = 1e-9;

/// Mean error, mean absolute error, and pooled root-mean-square error over
/// one aligned set of truth/forecast pairs. Errors are truth minus forecast,
/// so a warm-biased forecast has negative ME.
#[derive(Clone, Debug, Serialize)]
pub struct PixelMetrics {
    pub me: f64,
    pub mae: f64,
    pub rmse: f64,
    pub images: usize,
    pub pixels_per_image: usize,
}

impl PixelMetrics {
    pub fn new(
        me: f64,
        mae: f64,
        rmse: f64,
        images: usize,
        pixels_per_image: usize,
    ) -> Result<Self> {
        if !(me.is_finite() && mae.is_finite() && rmse.is_finite()) {
            return Err(CoreError::NonFinite("pixel metrics".into()));
        }
        if mae < 0.0 || rmse < 0.0 {
            return Err(CoreError::InvalidArgument("mae and rmse must be >= 0".into()));
        }
        if mae < me.abs() * (1.0 - INEQUALITY_SLACK) {
            return Err(CoreError::InvalidArgument(format!(
                "mae {mae} below |me| {}: inconsistent aggregation",
                me.abs()
            )));
        }
        if images == 0 || pixels_per_image == 0 {
            return Err(CoreError::EmptyInput("pixel metrics over empty set".into()));
        }
        Ok(PixelMetrics { me, mae, rmse, images, pixels_per_image })
    }
}

/// ME and MAE are plain means over every pixel of every image; RMSE pools
/// the squared errors across the entire set first and takes one root.
pub fn pixel_metrics(truth: &[Volume], forecast: &[Volume]) -> Result<PixelMetrics> {
    if truth.is_empty() {
        return Err(CoreError::EmptyInput("pixel metrics over empty set".into()));
    }
    if truth.len() != forecast.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} truth images vs {} forecasts",
            truth.len(),
            forecast.len()
        )));
    }
    let (mut sum, mut sum_abs, mut sum_sq) = (0.0, 0.0, 0.0);
    for (t, f) in truth.iter().zip(forecast) {
        if !t.same_shape(&truth[0]) || !f.same_shape(t) {
            return Err(CoreError::ShapeMismatch("misaligned truth/forecast shapes".into()));
        }
        for (a, b) in t.data.iter().zip(&f.data) {
            let e = a - b;
            sum += e;
            sum_abs += e.abs();
            sum_sq += e * e;
        }
    }
    let n = (truth.len() * truth[0].len()) as f64;
    let metrics = PixelMetrics::new(
        sum / n,
        sum_abs / n,
        (sum_sq / n).sqrt(),
        truth.len(),
        truth[0].len(),
    )?;
    // Power-mean inequality: the pooled root-mean-square can never fall
    // below the mean absolute error.
    assert!(
        metrics.rmse >= metrics.mae * (1.0 - INEQUALITY_SLACK),
        "rmse {} < mae {}",
        metrics.rmse,
        metrics.mae
    );
    Ok(metrics)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadSkillConfig {
    /// Skill-quantile bins in the reliability curve.
    pub bins: usize,
    /// Multiply spreads by sqrt((M+1)/M), the small-ensemble inflation that
    /// makes a statistically calibrated M-member ensemble score ratio 1.
    pub small_ensemble_factor: bool,
}

impl Default for SpreadSkillConfig {
    fn default() -> Self {
        SpreadSkillConfig { bins: 5, small_ensemble_factor: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadSkillBin {
    pub mean_spread: f64,
    pub mean_skill: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpreadSkillCurve {
    /// Quantile bins ordered by increasing skill; counts sum to `samples`.
    pub bins: Vec<SpreadSkillBin>,
    pub mean_spread: f64,
    pub mean_skill: f64,
    /// mean spread / mean skill; 1 is perfectly dispersive. Skill exactly 0
    /// maps to 0 (degenerate, spread also 0) or infinity.
    pub ratio: f64,
    pub samples: usize,
    pub factor_applied: bool,
}

/// One sample = every member's field at a fixed (case, lead) plus the truth.
pub fn spread_skill_from_samples(
    samples: &[(Vec<&Volume>, &Volume)],
    cfg: &SpreadSkillConfig,
) -> Result<SpreadSkillCurve> {
    if samples.is_empty() {
        return Err(CoreError::EmptyInput("spread-skill over no samples".into()));
    }
    if cfg.bins == 0 {
        return Err(CoreError::InvalidArgument("bins must be >= 1".into()));
    }
    let mut pairs = Vec::with_capacity(samples.len());
    for (members, truth) in samples {
        let m = members.len();
        if m < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "spread needs >= 2 members, got {m}"
            )));
        }
        for member in members {
            if !member.same_shape(truth) {
                return Err(CoreError::ShapeMismatch("member/truth shapes differ".into()));
            }
        }
        let pixels = truth.len();
        let (mut var_sum, mut err_sum) = (0.0, 0.0);
        for j in 0..pixels {
            let mean = members.iter().map(|v| v.data[j]).sum::<f64>() / m as f64;
            let var = members.iter().map(|v| (v.data[j] - mean).powi(2)).sum::<f64>()
                / (m as f64 - 1.0);
            var_sum += var;
            err_sum += (mean - truth.data[j]).powi(2);
        }
        let factor = if cfg.small_ensemble_factor {
            ((m as f64 + 1.0) / m as f64).sqrt()
        } else {
            1.0
        };
        pairs.push(((var_sum / pixels as f64).sqrt() * factor, (err_sum / pixels as f64).sqrt()));
    }

    let n = pairs.len() as f64;
    let mean_spread = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_skill = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let ratio = if mean_skill == 0.0 {
        if mean_spread == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        mean_spread / mean_skill
    };

    // Quantile bins: sort by skill, split as evenly as possible.
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
    let bins_n = cfg.bins.min(pairs.len());
    let (base, extra) = (pairs.len() / bins_n, pairs.len() % bins_n);
    let mut bins = Vec::with_capacity(bins_n);
    let mut at = 0;
    for b in 0..bins_n {
        let size = base + usize::from(b < extra);
        let chunk = &pairs[at..at + size];
        bins.push(SpreadSkillBin {
            mean_spread: chunk.iter().map(|p| p.0).sum::<f64>() / size as f64,
            mean_skill: chunk.iter().map(|p| p.1).sum::<f64>() / size as f64,
            count: size,
        });
        at += size;
    }
    debug_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());

    Ok(SpreadSkillCurve {
        bins,
        mean_spread,
        mean_skill,
        ratio,
        samples: pairs.len(),
        factor_applied: cfg.small_ensemble_factor,
    })
}

/// Reliability of one ensemble forecast against per-lead truth: each lead
/// contributes one spread/skill sample.
pub fn spread_skill(
    ens: &EnsembleForecast,
    truth: &[Volume],
    cfg: &SpreadSkillConfig,
) -> Result<SpreadSkillCurve> {
    if truth.len() != ens.leads() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} truth frames vs {} leads",
            truth.len(),
            ens.leads()
        )));
    }
    let samples: Vec<(Vec<&Volume>, &Volume)> = (0..ens.leads())
        .map(|k| (ens.members.iter().map(|m| &m[k]).collect(), &truth[k]))
        .collect();
    spread_skill_from_samples(&samples, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_volume, seed_rng};
    use approx::assert_relative_eq;

    fn vol(vals: &[f64]) -> Volume {
        let mut v = Volume::zeros(1, 1, vals.len());
        v.data.copy_from_slice(vals);
        v
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let t = vec![vol(&[1.0, 2.0]), vol(&[3.0, 4.0])];
        let m = pixel_metrics(&t, &t).unwrap();
        assert_eq!((m.me, m.mae, m.rmse), (0.0, 0.0, 0.0));
        assert_eq!((m.images, m.pixels_per_image), (2, 2));
    }

    #[test]
    fn warm_bias_has_negative_me() {
        // forecast = truth + 2 K everywhere
        let t = vec![vol(&[270.0, 280.0])];
        let f = vec![vol(&[272.0, 282.0])];
        let m = pixel_metrics(&t, &f).unwrap();
        assert_relative_eq!(m.me, -2.0, epsilon = 1e-12);
        assert_relative_eq!(m.mae, 2.0, epsilon = 1e-12);
        assert_relative_eq!(m.rmse, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rmse_pools_before_rooting() {
        // Errors {0, 2} over two one-pixel images: pooled RMSE is sqrt(2),
        // not the mean of per-image RMSEs (which would be 1).
        let t = vec![vol(&[5.0]), vol(&[5.0])];
        let f = vec![vol(&[5.0]), vol(&[3.0])];
        let m = pixel_metrics(&t, &f).unwrap();
        assert_relative_eq!(m.rmse, 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(m.mae, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = seed_rng(1);
        let t: Vec<Volume> = (0..6).map(|_| normal_volume(&mut rng, 1, 4, 4)).collect();
        let f: Vec<Volume> = (0..6).map(|_| normal_volume(&mut rng, 1, 4, 4)).collect();
        let a = pixel_metrics(&t, &f).unwrap();
        let perm = [5, 2, 0, 4, 1, 3];
        let tp: Vec<Volume> = perm.iter().map(|&i| t[i].clone()).collect();
        let fp: Vec<Volume> = perm.iter().map(|&i| f[i].clone()).collect();
        let b = pixel_metrics(&tp, &fp).unwrap();
        assert_relative_eq!(a.me, b.me, max_relative = 1e-12, epsilon = 1e-15);
        assert_relative_eq!(a.mae, b.mae, max_relative = 1e-12);
        assert_relative_eq!(a.rmse, b.rmse, max_relative = 1e-12);
    }

    #[test]
    fn inconsistent_aggregates_are_rejected() {
        assert!(PixelMetrics::new(3.0, 1.0, 4.0, 1, 1).is_err()); // mae < |me|
        assert!(PixelMetrics::new(0.0, -1.0, 1.0, 1, 1).is_err());
        assert!(PixelMetrics::new(0.0, 1.0, 1.0, 0, 1).is_err());
        assert!(pixel_metrics(&[vol(&[1.0])], &[]).is_err());
        assert!(pixel_metrics(&[vol(&[1.0])], &[vol(&[1.0, 2.0])]).is_err());
    }

    fn exchangeable_samples(
        cases: usize,
        members: usize,
        size: usize,
        seed: u64,
    ) -> (Vec<Vec<Volume>>, Vec<Volume>) {
        // Truth and members are draws from the same predictive distribution:
        // center + independent unit noise. The gold calibrated oracle.
        let mut rng = seed_rng(seed);
        let mut mem = Vec::new();
        let mut truths = Vec::new();
        for _ in 0..cases {
            let center = normal_volume(&mut rng, 1, size, size).scaled(2.0);
            let mut truth = center.clone();
            truth.add_scaled(&normal_volume(&mut rng, 1, size, size), 1.0).unwrap();
            let ms: Vec<Volume> = (0..members)
                .map(|_| {
                    let mut m = center.clone();
                    m.add_scaled(&normal_volume(&mut rng, 1, size, size), 1.0).unwrap();
                    m
                })
                .collect();
            mem.push(ms);
            truths.push(truth);
        }
        (mem, truths)
    }

    #[test]
    fn calibrated_ensemble_scores_ratio_one() {
        let (mem, truths) = exchangeable_samples(200, 10, 8, 2);
        let samples: Vec<(Vec<&Volume>, &Volume)> = mem
            .iter()
            .zip(&truths)
            .map(|(ms, t)| (ms.iter().collect(), t))
            .collect();
        let curve =
            spread_skill_from_samples(&samples, &SpreadSkillConfig::default()).unwrap();
        assert!(
            (curve.ratio - 1.0).abs() < 0.05,
            "calibrated ratio {} not within 5%",
            curve.ratio
        );
        assert_eq!(curve.bins.iter().map(|b| b.count).sum::<usize>(), 200);
    }

    /// The naive "members = truth + noise" reading is NOT calibrated: truth
    /// sits at the ensemble center, so skill shrinks like 1/sqrt(M) while
    /// spread stays O(1), and the ratio lands near sqrt(M+1), not 1.
    #[test]
    fn members_centered_on_truth_are_overdispersive()  {
        let mut rng = seed_rng(3);
        let m = 10;
        let samples_raw: Vec<(Vec<Volume>, Volume)> = (0..200)
            .map(|_| {
                let truth = normal_volume(&mut rng, 1, 8, 8).scaled(2.0);
                let members: Vec<Volume> = (0..m)
                    .map(|_| {
                        let mut v = truth.clone();
                        v.add_scaled(&normal_volume(&mut rng, 1, 8, 8), 1.0).unwrap();
                        v
                    })
                    .collect();
                (members, truth)
            })
            .collect();
        let samples: Vec<(Vec<&Volume>, &Volume)> = samples_raw
            .iter()
            .map(|(ms, t)| (ms.iter().collect(), t))
            .collect();
        let curve =
            spread_skill_from_samples(&samples, &SpreadSkillConfig::default()).unwrap();
        let expect = ((m + 1) as f64).sqrt();
        assert!(
            (curve.ratio - expect).abs() / expect < 0.1,
            "ratio {} vs sqrt(M+1) = {expect}",
            curve.ratio
        );
    }

    #[test]
    fn identical_members_score_ratio_zero() {
        let member = vol(&[1.0, 2.0, 3.0]);
        let truth = vol(&[0.0, 0.0, 0.0]);
        let samples = vec![(vec![&member, &member, &member], &truth)];
        let curve =
            spread_skill_from_samples(&samples, &SpreadSkillConfig::default()).unwrap();
        assert_eq!(curve.mean_spread, 0.0);
        assert_eq!(curve.ratio, 0.0);
    }

    #[test]
    fn two_member_hand_case() {
        // Members t+1 and t-1 around truth t: per-pixel variance 2, so the
        // spread is sqrt(2) bare or sqrt(2)*sqrt(3/2) = sqrt(3) corrected.
        // The ensemble mean equals the truth, so skill 0 forces ratio inf.
        let truth = vol(&[4.0, 7.0]);
        let hi = vol(&[5.0, 8.0]);
        let lo = vol(&[3.0, 6.0]);
        let samples = vec![(vec![&hi, &lo], &truth)];
        let on = spread_skill_from_samples(&samples, &SpreadSkillConfig::default()).unwrap();
        assert_relative_eq!(on.mean_spread, 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(on.mean_skill, 0.0);
        assert!(on.ratio.is_infinite());
        let off = spread_skill_from_samples(
            &samples,
            &SpreadSkillConfig { small_ensemble_factor: false, ..Default::default() },
        )
        .unwrap();
        assert_relative_eq!(off.mean_spread, 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn bin_counts_partition_the_samples() {
        let (mem, truths) = exchangeable_samples(13, 3, 2, 4);
        let samples: Vec<(Vec<&Volume>, &Volume)> = mem
            .iter()
            .zip(&truths)
            .map(|(ms, t)| (ms.iter().collect(), t))
            .collect();
        let curve = spread_skill_from_samples(
            &samples,
            &SpreadSkillConfig { bins: 4, ..Default::default() },
        )
        .unwrap();
        let counts: Vec<usize> = curve.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts.iter().sum::<usize>(), 13);
        assert_eq!(counts, vec![4, 3, 3, 3]);
        // bins ordered by skill
        for w in curve.bins.windows(2) {
            assert!(w[0].mean_skill <= w[1].mean_skill);
        }
    }

    #[test]
    fn single_member_is_rejected() {
        let t = vol(&[0.0]);
        let m = vol(&[1.0]);
        let samples = vec![(vec![&m], &t)];
        assert!(spread_skill_from_samples(&samples, &SpreadSkillConfig::default()).is_err());
    }

    #[test]
    fn ensemble_wrapper_uses_one_sample_per_lead() {
        use crate::forecast::{ensemble, Persistence, RolloutConfig};
        let init = [vol(&[1.0, 2.0]), vol(&[1.5, 2.5])];
        let cfg = RolloutConfig { leads: 4, members: 3, ..Default::default() };
        let ens = ensemble(&Persistence, &init, &cfg, "t0").unwrap();
        let truth: Vec<Volume> = (0..4).map(|k| vol(&[1.5 + k as f64, 2.5])).collect();
        let curve = spread_skill(&ens, &truth, &SpreadSkillConfig::default()).unwrap();
        assert_eq!(curve.samples, 4);
        assert_eq!(curve.mean_spread, 0.0);
    }
}
