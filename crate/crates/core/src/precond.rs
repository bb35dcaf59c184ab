//! Preconditioning scalars, the denoiser wrapper around a raw network, the
//! closed-form ideal denoisers used as oracles, and the score-denoiser bridge.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::network::ConvNet;
use crate::volume::Volume;

/// sigma_data: standard deviation of the (normalized) training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecondParams {
    pub sigma_data: f64,
}

impl Default for PrecondParams {
    fn default() -> Self {
        PrecondParams { sigma_data: 1.0 }
    }
}

impl PrecondParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(CoreError::InvalidArgument("sigma_data must be > 0".into()));
        }
        Ok(())
    }
}

pub fn c_skip(sigma: f64, p: &PrecondParams) -> f64 {
    let sd2 = p.sigma_data * p.sigma_data;
    sd2 / (sigma * sigma + sd2)
}

pub fn c_out(sigma: f64, p: &PrecondParams) -> f64 {
    let sd2 = p.sigma_data * p.sigma_data;
    sigma * p.sigma_data / (sd2 + sigma * sigma).sqrt()
}

pub fn c_in(sigma: f64, p: &PrecondParams) -> f64 {
    let sd2 = p.sigma_data * p.sigma_data;
    1.0 / (sd2 + sigma * sigma).sqrt()
}

/// ln(sigma) / 4; undefined at sigma = 0.
pub fn c_noise(sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "c_noise requires sigma > 0, got {sigma}"
        )));
    }
    Ok(sigma.ln() / 4.0)
}

/// Any denoiser D(x | c; sigma): analytic oracle, preconditioned network, or
/// residual/latent wrapper. Implementations must be safe for concurrent
/// read-only evaluation and return a volume of the input's shape.
pub trait Denoiser: Sync {
    fn evaluate(&self, x: &Volume, cond: Option<&Volume>, sigma: f64) -> Result<Volume>;
}

/// D(x|c; sigma) = c_skip * x + c_out * F(c_in * x | c; c_noise) over a frozen
/// network.
pub struct PrecondDenoiser<'a> {
    net: &'a ConvNet,
    params: PrecondParams,
}

pub fn wrap_denoiser<'a>(net: &'a ConvNet, params: PrecondParams) -> Result<PrecondDenoiser<'a>> {
    params.validate()?;
    Ok(PrecondDenoiser { net, params })
}

impl PrecondDenoiser<'_> {
    pub fn params(&self) -> PrecondParams {
        self.params
    }
}

impl Denoiser for PrecondDenoiser<'_> {
    fn evaluate(&self, x: &Volume, cond: Option<&Volume>, sigma: f64) -> Result<Volume> {
        if sigma == 0.0 {
            // c_skip -> 1 and c_out -> 0: the wrapper is the identity.
            return Ok(x.clone());
        }
        if sigma < 0.0 {
            return Err(CoreError::InvalidArgument("sigma must be >= 0".into()));
        }
        let scaled = x.scaled(c_in(sigma, &self.params));
        let input = match cond {
            Some(c) => Volume::concat_channels(&[&scaled, c])?,
            None => scaled,
        };
        let raw = self.net.forward_inference(&input, c_noise(sigma)?)?;
        if raw.c != x.c || raw.h != x.h || raw.w != x.w {
            return Err(CoreError::ShapeMismatch(format!(
                "network returned {}x{}x{}, expected {}x{}x{}",
                raw.c, raw.h, raw.w, x.c, x.h, x.w
            )));
        }
        let mut out = x.scaled(c_skip(sigma, &self.params));
        out.add_scaled(&raw, c_out(sigma, &self.params))?;
        Ok(out)
    }
}

/// Mean of an analytic prior component: a constant plane or a full field.
#[derive(Clone, Debug)]
pub enum PriorMean {
    Scalar(f64),
    Field(Volume),
}

impl PriorMean {
    fn at(&self, i: usize) -> f64 {
        match self {
            PriorMean::Scalar(m) => *m,
            PriorMean::Field(v) => v.data[i],
        }
    }

    fn check_shape(&self, x: &Volume) -> Result<()> {
        if let PriorMean::Field(v) = self {
            if !v.same_shape(x) {
                return Err(CoreError::ShapeMismatch("prior mean shape".into()));
            }
        }
        Ok(())
    }
}

/// N(mean, var * I) over fields (scalar covariance).
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: PriorMean,
    pub var: f64,
}

impl GaussianPrior {
    pub fn new(mean: PriorMean, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(CoreError::InvalidArgument("prior variance must be > 0".into()));
        }
        Ok(GaussianPrior { mean, var })
    }

    /// Posterior mean E[y | y + n = x] with n ~ N(0, sigma^2 I):
    /// (s^2 x + sigma^2 mu) / (s^2 + sigma^2).
    fn posterior_mean(&self, x: &Volume, sigma: f64) -> Result<Volume> {
        self.mean.check_shape(x)?;
        let s2 = self.var;
        let g2 = sigma * sigma;
        let denom = s2 + g2;
        let mut out = Volume::zeros(x.c, x.h, x.w);
        for i in 0..x.data.len() {
            out.data[i] = (s2 * x.data[i] + g2 * self.mean.at(i)) / denom;
        }
        Ok(out)
    }

    /// ln N(x; mu, (var + sigma^2) I) summed over pixels.
    fn log_marginal(&self, x: &Volume, sigma: f64) -> Result<f64> {
        self.mean.check_shape(x)?;
        let v = self.var + sigma * sigma;
        let n = x.data.len() as f64;
        let mut quad = 0.0;
        for i in 0..x.data.len() {
            let d = x.data[i] - self.mean.at(i);
            quad += d * d;
        }
        Ok(-0.5 * (n * (v * 2.0 * std::f64::consts::PI).ln() + quad / v))
    }
}

impl Denoiser for GaussianPrior {
    fn evaluate(&self, x: &Volume, _cond: Option<&Volume>, sigma: f64) -> Result<Volume> {
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        self.posterior_mean(x, sigma)
    }
}

/// Weighted mixture of Gaussian components; the ideal denoiser is the
/// responsibility-weighted combination of per-component posterior means.
#[derive(Clone, Debug)]
pub struct MixturePrior {
    weights: Vec<f64>,
    comps: Vec<GaussianPrior>,
}

impl MixturePrior {
    pub fn new(weights: Vec<f64>, comps: Vec<GaussianPrior>) -> Result<Self> {
        if weights.is_empty() || weights.len() != comps.len() {
            return Err(CoreError::InvalidArgument("mixture needs matching weights/components".into()));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(CoreError::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(MixturePrior { weights, comps })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Log responsibilities via log-sum-exp over component marginals.
    fn log_responsibilities(&self, x: &Volume, sigma: f64) -> Result<Vec<f64>> {
        let mut logs = Vec::with_capacity(self.comps.len());
        for (w, comp) in self.weights.iter().zip(&self.comps) {
            logs.push(w.ln() + comp.log_marginal(x, sigma)?);
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logs.into_iter().map(|l| l - lse).collect())
    }
}

impl Denoiser for MixturePrior {
    fn evaluate(&self, x: &Volume, _cond: Option<&Volume>, sigma: f64) -> Result<Volume> {
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let resp = self.log_responsibilities(x, sigma)?;
        let mut out = Volume::zeros(x.c, x.h, x.w);
        for (lr, comp) in resp.iter().zip(&self.comps) {
            let pm = comp.posterior_mean(x, sigma)?;
            out.add_scaled(&pm, lr.exp())?;
        }
        Ok(out)
    }
}

/// ln p(x; sigma) for the analytic priors (used by finite-difference oracles).
pub fn log_marginal_gaussian(prior: &GaussianPrior, x: &Volume, sigma: f64) -> Result<f64> {
    prior.log_marginal(x, sigma)
}

pub fn log_marginal_mixture(prior: &MixturePrior, x: &Volume, sigma: f64) -> Result<f64> {
    let mut logs = Vec::with_capacity(prior.comps.len());
    for (w, comp) in prior.weights.iter().zip(&prior.comps) {
        logs.push(w.ln() + comp.log_marginal(x, sigma)?);
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// score(x; sigma) = (D(x|c; sigma) - x) / sigma^2.
pub fn score_from_denoiser(
    d: &dyn Denoiser,
    x: &Volume,
    cond: Option<&Volume>,
    sigma: f64,
) -> Result<Volume> {
    if sigma <= 0.0 {
        return Err(CoreError::InvalidArgument("score requires sigma > 0".into()));
    }
    let den = d.evaluate(x, cond, sigma)?;
    let mut out = den.sub(x)?;
    let inv = 1.0 / (sigma * sigma);
    for v in &mut out.data {
        *v *= inv;
    }
    Ok(out)
}
