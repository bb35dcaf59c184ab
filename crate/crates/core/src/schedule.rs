//! Noise-level discretization for generation and the random noise-level
//! distribution used during training.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Stream;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Descending noise levels sigma_0 > ... > sigma_{N-1} > sigma_N = 0.
/// sigma_0 = sigma_max and sigma_{N-1} = sigma_min; the trailing zero is
/// stored explicitly so the final integration step lands on the data manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
    num_steps: usize,
    sigma_max: f64,
    sigma_min: f64,
    rho: f64,
}

impl SigmaSchedule {
    /// All levels including the trailing zero (`num_steps + 1` entries).
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Consecutive (sigma_i, sigma_{i+1}) integration intervals.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.sigmas.windows(2).map(|p| (p[0], p[1]))
    }
}

/// sigma_i = (sigma_max^{1/rho} + i/(N-1) * (sigma_min^{1/rho} -
/// sigma_max^{1/rho}))^rho for i in 0..N, with sigma_N = 0 appended.
/// N = 1 degenerates to [sigma_max, 0].
pub fn build_schedule(
    num_steps: usize,
    sigma_max: f64,
    sigma_min: f64,
    rho: f64,
) -> Result<SigmaSchedule> {
    if num_steps < 1 {
        return Err(CoreError::InvalidArgument("num_steps must be >= 1".into()));
    }
    if !(sigma_max > sigma_min && sigma_min > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "need sigma_max > sigma_min > 0, got {sigma_max} / {sigma_min}"
        )));
    }
    if rho < 1.0 || !rho.is_finite() {
        return Err(CoreError::InvalidArgument(format!("rho must be >= 1, got {rho}")));
    }

    let mut sigmas = Vec::with_capacity(num_steps + 1);
    if num_steps == 1 {
        sigmas.push(sigma_max);
    } else {
        let a = sigma_max.powf(1.0 / rho);
        let b = sigma_min.powf(1.0 / rho);
        for i in 0..num_steps {
            let t = i as f64 / (num_steps - 1) as f64;
            sigmas.push((a + t * (b - a)).powf(rho));
        }
        // Pin the endpoints exactly; powf round-trips can drift in the last ulp.
        sigmas[0] = sigma_max;
        sigmas[num_steps - 1] = sigma_min;
    }
    sigmas.push(0.0);

    for w in sigmas.windows(2) {
        if !(w[0] > w[1]) {
            return Err(CoreError::InvalidArgument(format!(
                "schedule is not strictly decreasing near {} -> {}",
                w[0], w[1]
            )));
        }
    }

    Ok(SigmaSchedule { sigmas, num_steps, sigma_max, sigma_min, rho })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaDistKind {
    LogNormal,
    LogUniform,
}

/// Distribution of per-image training noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSigmaDist {
    pub kind: SigmaDistKind,
    /// Location of ln(sigma) for the log-normal kind.
    pub loc: f64,
    /// Scale of ln(sigma) for the log-normal kind; must be positive.
    pub scale: f64,
    /// Draws are clamped into [clamp.0, clamp.1]. The log-uniform kind draws
    /// ln(sigma) uniformly over this range (loc/scale unused).
    pub clamp: (f64, f64),
}

impl Default for TrainSigmaDist {
    fn default() -> Self {
        TrainSigmaDist {
            kind: SigmaDistKind::LogNormal,
            loc: -1.2,
            scale: 1.2,
            clamp: (0.002, 80.0),
        }
    }
}

impl TrainSigmaDist {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(CoreError::InvalidArgument("sigma dist scale must be > 0".into()));
        }
        if !(self.clamp.0 > 0.0 && self.clamp.1 >= self.clamp.0) {
            return Err(CoreError::InvalidArgument(format!(
                "sigma clamp range must satisfy 0 < lo <= hi, got {:?}",
                self.clamp
            )));
        }
        Ok(())
    }
}

pub fn sample_train_sigma(dist: &TrainSigmaDist, rng: &mut Stream) -> f64 {
    let (lo, hi) = dist.clamp;
    let sigma = match dist.kind {
        SigmaDistKind::LogNormal => {
            let z: f64 = StandardNormal.sample(rng);
            (dist.loc + dist.scale * z).exp()
        }
        SigmaDistKind::LogUniform => {
            let u: f64 = rng.gen_range(0.0..1.0);
            (lo.ln() + u * (hi.ln() - lo.ln())).exp()
        }
    };
    sigma.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use proptest::prelude::*;

    #[test]
    fn two_step_schedule_is_endpoints() {
        let s = build_schedule(2, 80.0, 0.002, 7.0).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.002, 0.0]);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 80.0, 0.002, 7.0).unwrap();
        assert_eq!(s.sigmas(), &[80.0, 0.0]);
    }

    #[test]
    fn three_step_middle_value_matches_formula_oracle() {
        // Independently evaluated closed form for (N=3, 80, 0.002, rho=7).
        let s = build_schedule(3, 80.0, 0.002, 7.0).unwrap();
        let oracle = 2.515218976147159;
        assert!((s.sigmas()[1] - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn selected_grid_point_endpoints() {
        let s = build_schedule(36, 140.0, 0.002, 10.0).unwrap();
        assert_eq!(s.sigmas()[0], 140.0);
        assert_eq!(s.sigmas()[35], 0.002);
        assert_eq!(s.sigmas()[36], 0.0);
    }

    #[test]
    fn rho_one_spacing_is_linear() {
        let s = build_schedule(5, 10.0, 2.0, 1.0).unwrap();
        let expect = [10.0, 8.0, 6.0, 4.0, 2.0, 0.0];
        for (a, b) in s.sigmas().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(build_schedule(0, 80.0, 0.002, 7.0).is_err());
        assert!(build_schedule(4, 0.002, 80.0, 7.0).is_err());
        assert!(build_schedule(4, 80.0, 0.0, 7.0).is_err());
        assert!(build_schedule(4, 80.0, 0.002, 0.5).is_err());
    }

    #[test]
    fn degenerate_clamp_pins_sigma() {
        let dist = TrainSigmaDist { clamp: (1.0, 1.0), ..Default::default() };
        let mut rng = seed_rng(3);
        for _ in 0..100 {
            assert_eq!(sample_train_sigma(&dist, &mut rng), 1.0);
        }
    }

    #[test]
    fn log_normal_mean_of_ln_sigma() {
        // Wide clamp so clipping is negligible; check E[ln sigma] ~ loc.
        let dist = TrainSigmaDist { clamp: (1e-6, 1e6), ..Default::default() };
        let mut rng = seed_rng(11);
        let n = 100_000;
        let mean_ln: f64 =
            (0..n).map(|_| sample_train_sigma(&dist, &mut rng).ln()).sum::<f64>() / n as f64;
        let se = dist.scale / (n as f64).sqrt();
        assert!(
            (mean_ln - dist.loc).abs() < 3.0 * se,
            "mean ln sigma {mean_ln} vs loc {} (3se {})",
            dist.loc,
            3.0 * se
        );
    }

    #[test]
    fn seeded_draws_are_identical() {
        let dist = TrainSigmaDist::default();
        let mut a = seed_rng(5);
        let mut b = seed_rng(5);
        for _ in 0..50 {
            assert_eq!(sample_train_sigma(&dist, &mut a), sample_train_sigma(&dist, &mut b));
        }
    }

    proptest! {
        #[test]
        fn schedules_decrease_strictly(
            n in 1usize..80,
            smax in 1.0f64..200.0,
            ratio in 1e-5f64..0.5,
            rho in 1.0f64..12.0,
        ) {
            let smin = smax * ratio;
            let s = build_schedule(n, smax, smin, rho).unwrap();
            prop_assert_eq!(s.sigmas().len(), n + 1);
            for w in s.sigmas().windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            prop_assert_eq!(s.sigmas()[0], smax);
            prop_assert_eq!(*s.sigmas().last().unwrap(), 0.0);
        }

        #[test]
        fn draws_stay_in_clamp(lo in 0.001f64..1.0, span in 1.0f64..100.0, seed in any::<u64>()) {
            let dist = TrainSigmaDist { clamp: (lo, lo * span), ..Default::default() };
            let mut rng = seed_rng(seed);
            for _ in 0..200 {
                let s = sample_train_sigma(&dist, &mut rng);
                prop_assert!(s >= lo && s <= lo * span);
            }
        }
    }
}
