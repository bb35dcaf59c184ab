//! Denoising training: the weighted score-matching objective, the batch loop
//! with gradient accumulation and early stopping, the deterministic MSE
//! baseline regressor, and residual-target construction for the
//! correction-diffusion pipeline.

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{CoreError, Result};
use crate::field::{NormStats, Units};
use crate::manifest::DatasetManifest;
use crate::network::{ConvNet, ConvNetSpec, ParamVector};
use crate::precond::{c_in, c_noise, c_out, c_skip, Denoiser, PrecondParams};
use crate::rng::{normal_volume, seed_rng, substream};
use crate::schedule::{sample_train_sigma, TrainSigmaDist};
use crate::tensor::read_tensor_file;
use crate::volume::Volume;
use rand::seq::SliceRandom;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// 1/sigma.
    InverseSigma,
    /// 1/c_out(sigma)^2 — keeps the effective target unit-variance across
    /// noise levels; the default.
    #[default]
    Edm,
    Uniform,
}

impl LossWeighting {
    pub fn weight(self, sigma: f64, pp: &PrecondParams) -> Result<f64> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "loss weight needs sigma > 0, got {sigma}"
            )));
        }
        Ok(match self {
            LossWeighting::InverseSigma => 1.0 / sigma,
            LossWeighting::Edm => {
                let co = c_out(sigma, pp);
                1.0 / (co * co)
            }
            LossWeighting::Uniform => 1.0,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of sub-batches whose gradients are averaged into one optimizer
    /// step (effective batch = batch_size * accum_factor).
    pub accum_factor: usize,
    pub weighting: LossWeighting,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            accum_factor: 1,
            weighting: LossWeighting::Edm,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accum_factor == 0 {
            return Err(CoreError::InvalidArgument(
                "epochs, batch size, and accumulation factor must be >= 1".into(),
            ));
        }
        if self.patience == 0 {
            return Err(CoreError::InvalidArgument("patience must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoreError::InvalidArgument("val fraction must lie in (0, 1)".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTaskKind {
    Unconditional,
    Conditional,
    /// Diffusion over (truth - baseline) residuals, conditioned on the
    /// original conditions plus the baseline prediction.
    CorrdiffResidual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainTask {
    pub kind: TrainTaskKind,
    pub condition_channels: usize,
    pub target_channels: usize,
}

/// Normalized training pairs. `cond` is empty for unconditional tasks;
/// otherwise it is index-aligned with `target`.
pub struct TrainingSet {
    pub cond: Vec<Volume>,
    pub target: Vec<Volume>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn cond_of(&self, i: usize) -> Option<&Volume> {
        self.cond.get(i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(CoreError::EmptyInput("training set".into()));
        }
        if !self.cond.is_empty() && self.cond.len() != self.target.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} conditions vs {} targets",
                self.cond.len(),
                self.target.len()
            )));
        }
        Ok(())
    }
}

/// Loads a dataset tensor ([count, frames*channels, h, w]) and slices each
/// sample into (condition frames, target frames) per the task layout.
/// `manifest_path` anchors the manifest's relative tensor reference.
pub fn load_training_set(
    manifest: &DatasetManifest,
    manifest_path: &std::path::Path,
    task: &TrainTask,
) -> Result<TrainingSet> {
    let tensor = read_tensor_file(&manifest.tensor_path(manifest_path))?;
    let batch = tensor.to_batch(manifest.units)?;
    let per_sample = manifest.frames_per_sample * manifest.channels;
    let mut cond = Vec::new();
    let mut target = Vec::new();
    for f in &batch {
        // Stored fields are physical; training runs in normalized space.
        let vol = if manifest.units == Units::Normalized {
            Volume::from_field(f)
        } else {
            Volume::from_field(&crate::field::normalize(f, &manifest.stats)?)
        };
        let vol = &vol;
        if vol.c != per_sample {
            return Err(CoreError::ShapeMismatch(format!(
                "sample has {} channels, manifest says {per_sample}",
                vol.c
            )));
        }
        let want = task.condition_channels + task.target_channels;
        if per_sample != want && task.kind != TrainTaskKind::Unconditional {
            return Err(CoreError::ShapeMismatch(format!(
                "task wants {want} channels per sample, dataset has {per_sample}"
            )));
        }
        match task.kind {
            TrainTaskKind::Unconditional => {
                target.push(slice_channels(vol, per_sample - task.target_channels, per_sample));
            }
            TrainTaskKind::Conditional | TrainTaskKind::CorrdiffResidual => {
                cond.push(slice_channels(vol, 0, task.condition_channels));
                target.push(slice_channels(vol, task.condition_channels, per_sample));
            }
        }
    }
    let set = TrainingSet { cond, target };
    set.validate()?;
    Ok(set)
}

fn slice_channels(v: &Volume, from: usize, to: usize) -> Volume {
    let mut out = Volume::zeros(to - from, v.h, v.w);
    for (i, c) in (from..to).enumerate() {
        out.plane_mut(i).copy_from_slice(v.plane(c));
    }
    out
}

/// Weighted denoising objective against any denoiser (analytic or learned):
/// weight(sigma) * mean((D(y + n | c; sigma) - y)^2).
pub fn denoising_loss(
    denoiser: &dyn Denoiser,
    y: &Volume,
    cond: Option<&Volume>,
    sigma: f64,
    noise: &Volume,
    weighting: LossWeighting,
    pp: &PrecondParams,
) -> Result<f64> {
    let w = weighting.weight(sigma, pp)?;
    let mut x = y.clone();
    x.add_scaled(noise, 1.0)?;
    let denoised = denoiser.evaluate(&x, cond, sigma)?;
    Ok(w * denoised.sub(y)?.mean_sq())
}

/// Same objective through the preconditioned wrapper around a trainable net,
/// returning the loss and its gradient w.r.t. the network parameters.
pub fn denoising_loss_with_grads(
    net: &mut ConvNet,
    pp: &PrecondParams,
    y: &Volume,
    cond: Option<&Volume>,
    sigma: f64,
    noise: &Volume,
    weighting: LossWeighting,
) -> Result<(f64, ParamVector)> {
    let w = weighting.weight(sigma, pp)?;
    let (cs, co, ci, cn) = (c_skip(sigma, pp), c_out(sigma, pp), c_in(sigma, pp), c_noise(sigma)?);

    let mut x = y.clone();
    x.add_scaled(noise, 1.0)?;
    let scaled = x.scaled(ci);
    let input = match cond {
        Some(c) => Volume::concat_channels(&[&scaled, c])?,
        None => scaled,
    };
    let raw = net.forward(&input, cn)?;

    // D = cs*x + co*raw; r = D - y; loss = w * mean(r^2); dL/draw = 2w/m * co * r
    let m = y.len() as f64;
    let mut residual = raw.scaled(co);
    residual.add_scaled(&x, cs)?;
    residual.add_scaled(y, -1.0)?;
    let loss = w * residual.mean_sq();
    let out_grad = residual.scaled(2.0 * w * co / m);
    let back = net.backward(&out_grad)?;
    Ok((loss, back.grads))
}

/// residual = y - baseline_pred. On volumes widened from f32 grids of
/// ordinary dynamic range the subtraction is exact in f64, so
/// `corrdiff_reconstruct` returns y to the bit.
pub fn corrdiff_target(y: &Volume, baseline_pred: &Volume) -> Result<Volume> {
    y.sub(baseline_pred)
}

pub fn corrdiff_reconstruct(baseline_pred: &Volume, residual: &Volume) -> Result<Volume> {
    baseline_pred.add(residual)
}

/// Pooled scalar stats over a set of volumes (used to re-normalize residual
/// targets, whose variance is far below the data's).
pub fn volume_set_stats(set: &[Volume], space: Units) -> Result<NormStats> {
    if set.is_empty() {
        return Err(CoreError::EmptyInput("volume set".into()));
    }
    let n: usize = set.iter().map(Volume::len).sum();
    let mean = set.iter().map(|v| v.data.iter().sum::<f64>()).sum::<f64>() / n as f64;
    let var = set
        .iter()
        .map(|v| v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    if var <= 0.0 {
        return Err(CoreError::Degenerate("zero-variance volume set".into()));
    }
    NormStats::scalar(mean, var.sqrt(), space)
}

/// Builds the residual-diffusion training set: target = normalized
/// (y - G(c)), condition = (c, G(c)). Returns the residual stats needed to
/// undo the normalization at generation time.
pub fn corrdiff_training_set(
    base: &TrainingSet,
    baseline: &ConvNet,
) -> Result<(TrainingSet, NormStats)> {
    base.validate()?;
    if base.cond.is_empty() {
        return Err(CoreError::InvalidArgument(
            "residual-diffusion construction needs a conditional dataset".into(),
        ));
    }
    let mut residuals = Vec::with_capacity(base.len());
    let mut cond = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let pred = baseline.forward_inference(&base.cond[i], 0.0)?;
        residuals.push(corrdiff_target(&base.target[i], &pred)?);
        cond.push(Volume::concat_channels(&[&base.cond[i], &pred])?);
    }
    let stats = volume_set_stats(&residuals, Units::Normalized)?;
    let (mu, sd) = (stats.mean_for(0), stats.std_for(0));
    for r in &mut residuals {
        for v in &mut r.data {
            *v = (*v - mu) / sd;
        }
    }
    Ok((TrainingSet { cond, target: residuals }, stats))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Tracks the best validation loss; `observe` returns true when training
/// should stop (no improvement for `patience` consecutive epochs).
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best >= self.patience
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }

    pub fn improved(&self) -> bool {
        self.since_best == 0
    }
}

/// Everything train_diffusion needs besides the data and loop config.
#[derive(Clone, Debug)]
pub struct DiffusionSetup {
    pub net_spec: ConvNetSpec,
    pub precond: PrecondParams,
    pub sigma_dist: TrainSigmaDist,
}

/// Contiguous tail split: the last ceil(n * fraction) samples validate.
/// Time-ordered data therefore never leaks adjacent frames across the split.
pub(crate) fn tail_split(n: usize, fraction: f64) -> (usize, usize) {
    let val = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    (n - val, val)
}

pub(crate) struct Accumulator {
    grads: Vec<f64>,
    pub(crate) count: usize,
    pub(crate) loss_sum: f64,
}

impl Accumulator {
    pub(crate) fn new(n: usize) -> Accumulator {
        Accumulator { grads: vec![0.0; n], count: 0, loss_sum: 0.0 }
    }

    pub(crate) fn add(&mut self, loss: f64, grads: &ParamVector) {
        for (a, g) in self.grads.iter_mut().zip(&grads.data) {
            *a += g;
        }
        self.count += 1;
        self.loss_sum += loss;
    }

    pub(crate) fn add_raw(&mut self, loss: f64, grads: &[f64]) {
        for (a, g) in self.grads.iter_mut().zip(grads) {
            *a += g;
        }
        self.count += 1;
        self.loss_sum += loss;
    }

    /// Mean gradient over everything added since the last take; resets all
    /// accumulated state.
    pub(crate) fn take_mean(&mut self) -> Vec<f64> {
        let k = self.count.max(1) as f64;
        let out: Vec<f64> = self.grads.iter().map(|g| g / k).collect();
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.count = 0;
        self.loss_sum = 0.0;
        out
    }
}

/// Trains the preconditioned denoiser on the weighted objective. Per epoch:
/// shuffle, draw per-sample (sigma, noise), accumulate gradients over
/// `accum_factor` sub-batches, step Adam. Validation uses (sigma, noise)
/// draws frozen at start so epochs are comparable; best-epoch parameters are
/// restored at the end.
pub fn train_diffusion(
    data: &TrainingSet,
    setup: &DiffusionSetup,
    cfg: &TrainConfig,
) -> Result<(ConvNet, TrainReport)> {
    cfg.validate()?;
    data.validate()?;
    setup.sigma_dist.validate()?;
    let mut net = ConvNet::denoiser(&setup.net_spec)?;
    run_loop(&mut net, data, cfg, |net, data, idx, rng| {
        let sigma = sample_train_sigma(&setup.sigma_dist, rng);
        let y = &data.target[idx];
        let noise = normal_volume(rng, y.c, y.h, y.w).scaled(sigma);
        denoising_loss_with_grads(
            net,
            &setup.precond,
            y,
            data.cond_of(idx),
            sigma,
            &noise,
            cfg.weighting,
        )
    })
    .map(|report| (net, report))
}

/// Plain MSE regression target = G(cond): the deterministic baseline.
pub fn train_baseline(
    data: &TrainingSet,
    net_spec: &ConvNetSpec,
    cfg: &TrainConfig,
) -> Result<(ConvNet, TrainReport)> {
    cfg.validate()?;
    data.validate()?;
    if data.cond.is_empty() {
        return Err(CoreError::InvalidArgument("baseline training needs conditions".into()));
    }
    let mut net = ConvNet::regressor(net_spec)?;
    run_loop(&mut net, data, cfg, |net, data, idx, _rng| {
        let (c, y) = (&data.cond[idx], &data.target[idx]);
        let pred = net.forward(c, 0.0)?;
        let residual = pred.sub(y)?;
        let loss = residual.mean_sq();
        let out_grad = residual.scaled(2.0 / y.len() as f64);
        let back = net.backward(&out_grad)?;
        Ok((loss, back.grads))
    })
    .map(|report| (net, report))
}

/// Shared epoch loop. `sample_loss` computes one sample's loss and gradient;
/// it receives the epoch RNG so stochastic objectives draw deterministically
/// in sample order (which makes gradient accumulation exactly reorderable).
fn run_loop<F>(
    net: &mut ConvNet,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut sample_loss: F,
) -> Result<TrainReport>
where
    F: FnMut(&mut ConvNet, &TrainingSet, usize, &mut crate::rng::Stream) -> Result<(f64, ParamVector)>,
{
    let n = data.len();
    if n < 2 {
        return Err(CoreError::EmptyInput("need at least 2 samples to split".into()));
    }
    let (n_train, n_val) = tail_split(n, cfg.val_fraction);

    // Frozen validation draws: each val sample gets a fixed stream seed so
    // its (sigma, noise) draw is identical every epoch.
    let val_rngs: Vec<u64> = (0..n_val).map(|j| substream(cfg.seed, "val-draws", j as u64)).collect();

    let mut adam = Adam::new(cfg.adam, net.num_params())?;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_params = net.params().data;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = seed_rng(substream(cfg.seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut draw_rng = seed_rng(substream(cfg.seed, "draws", epoch as u64));

        let mut acc = Accumulator::new(net.num_params());
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let macro_batch = cfg.batch_size * cfg.accum_factor;
        for chunk in order.chunks(macro_batch) {
            for &idx in chunk {
                let (loss, grads) = sample_loss(net, data, idx, &mut draw_rng)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(CoreError::TrainingDiverged {
                        epoch,
                        last_good: Box::new(ParamVector {
                            data: best_params,
                            layout: net.layout(),
                        }),
                    });
                }
                acc.add(loss, &grads);
            }
            epoch_loss += acc.loss_sum;
            seen += acc.count;
            let mean_grads = acc.take_mean();
            let mut params = net.params().data;
            adam.step(&mut params, &mean_grads)?;
            net.set_params(&params)?;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;

        let mut val_loss = 0.0;
        for j in 0..n_val {
            let mut rng = seed_rng(val_rngs[j]);
            let (loss, _) = sample_loss(net, data, n_train + j, &mut rng)?;
            val_loss += loss;
        }
        val_loss /= n_val as f64;
        curve.push(EpochLoss { epoch, train_loss, val_loss });

        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved() {
            best_params = net.params().data;
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    net.set_params(&best_params)?;
    let (best_epoch, best_val_loss) = stopper.best();
    Ok(TrainReport { curve, best_epoch, best_val_loss, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::precond::{GaussianPrior, PriorMean};
    use approx::assert_relative_eq;

    fn spec(in_c: usize, out_c: usize, seed: u64) -> ConvNetSpec {
        ConvNetSpec {
            in_channels: in_c,
            out_channels: out_c,
            hidden: vec![6],
            downsample_depth: 0,
            activation: Activation::Silu,
            param_seed: seed,
        }
    }

    // Toy mapping: target is the pixelwise mean of the two condition frames.
    fn toy_set(n: usize, h: usize, seed: u64) -> TrainingSet {
        let mut rng = seed_rng(seed);
        let mut cond = Vec::new();
        let mut target = Vec::new();
        for _ in 0..n {
            let c = normal_volume(&mut rng, 2, h, h);
            let mut t = Volume::zeros(1, h, h);
            for i in 0..h * h {
                t.data[i] = 0.5 * (c.plane(0)[i] + c.plane(1)[i]);
            }
            cond.push(c);
            target.push(t);
        }
        TrainingSet { cond, target }
    }

    #[test]
    fn weighting_kinds() {
        let pp = PrecondParams { sigma_data: 1.0 };
        let u = LossWeighting::Uniform.weight(4.0, &pp).unwrap();
        let inv = LossWeighting::InverseSigma.weight(4.0, &pp).unwrap();
        assert_relative_eq!(u, 1.0);
        assert_relative_eq!(inv, 0.25); // uniform / 4
        let co = c_out(4.0, &pp);
        assert_relative_eq!(LossWeighting::Edm.weight(4.0, &pp).unwrap(), 1.0 / (co * co));
        assert!(LossWeighting::Edm.weight(0.0, &pp).is_err());
    }

    #[test]
    fn identity_denoiser_loss_is_noise_power() {
        // D == y + n exactly -> residual = n, uniform loss = mean(n^2) ~ sigma^2.
        struct Identity;
        impl Denoiser for Identity {
            fn evaluate(&self, x: &Volume, _c: Option<&Volume>, _s: f64) -> Result<Volume> {
                Ok(x.clone())
            }
        }
        let pp = PrecondParams::default();
        let mut rng = seed_rng(3);
        let y = Volume::zeros(1, 64, 64);
        let sigma = 2.0;
        let mut total = 0.0;
        let draws = 20;
        for _ in 0..draws {
            let n = normal_volume(&mut rng, 1, 64, 64).scaled(sigma);
            total +=
                denoising_loss(&Identity, &y, None, sigma, &n, LossWeighting::Uniform, &pp).unwrap();
        }
        assert_relative_eq!(total / draws as f64, sigma * sigma, max_relative = 0.05);
    }

    #[test]
    fn perfect_denoiser_loss_vanishes_as_sigma_shrinks() {
        let pp = PrecondParams::default();
        let prior = GaussianPrior::new(PriorMean::Scalar(0.0), 1.0).unwrap();
        let mut rng = seed_rng(4);
        // y drawn from the prior itself.
        let y = normal_volume(&mut rng, 1, 32, 32);
        let mut last = f64::INFINITY;
        for sigma in [1.0, 0.1, 0.01, 0.001] {
            let n = normal_volume(&mut rng, 1, 32, 32).scaled(sigma);
            let loss =
                denoising_loss(&prior, &y, None, sigma, &n, LossWeighting::Uniform, &pp).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn analytic_denoiser_hits_posterior_variance_floor() {
        // E||D - y||^2 / m = s^2 sigma^2 / (s^2 + sigma^2) for the Gaussian prior.
        let pp = PrecondParams::default();
        let s = 1.0;
        let prior = GaussianPrior::new(PriorMean::Scalar(0.0), s * s).unwrap();
        let mut rng = seed_rng(5);
        for sigma in [0.5, 2.0] {
            let floor = s * s * sigma * sigma / (s * s + sigma * sigma);
            let draws = 200;
            let mut losses = Vec::with_capacity(draws);
            for _ in 0..draws {
                let y = normal_volume(&mut rng, 1, 16, 16).scaled(s);
                let n = normal_volume(&mut rng, 1, 16, 16).scaled(sigma);
                losses.push(
                    denoising_loss(&prior, &y, None, sigma, &n, LossWeighting::Uniform, &pp)
                        .unwrap(),
                );
            }
            let mean = losses.iter().sum::<f64>() / draws as f64;
            let var =
                losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - floor).abs() <= 3.0 * se,
                "sigma {sigma}: mean {mean} vs floor {floor} (se {se})"
            );
        }
    }

    #[test]
    fn corrdiff_identities() {
        let mut rng = seed_rng(6);
        // f32-originated volumes: exactness domain of the reconstruction.
        let quantize = |v: Volume| -> Volume {
            let mut q = v;
            for x in &mut q.data {
                *x = *x as f32 as f64;
            }
            q
        };
        let y = quantize(normal_volume(&mut rng, 1, 8, 8));
        let b = quantize(normal_volume(&mut rng, 1, 8, 8));

        let r = corrdiff_target(&y, &b).unwrap();
        let recon = corrdiff_reconstruct(&b, &r).unwrap();
        assert_eq!(recon.data, y.data); // bit-exact

        let zero = corrdiff_target(&y, &y).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let from_zero = corrdiff_target(&y, &Volume::zeros(1, 8, 8)).unwrap();
        assert_eq!(from_zero.data, y.data);

        assert!(corrdiff_target(&y, &Volume::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn corrdiff_set_renormalizes_and_grows_condition() {
        let data = toy_set(12, 6, 7);
        let baseline = ConvNet::regressor(&spec(2, 1, 8)).unwrap();
        let (set, stats) = corrdiff_training_set(&data, &baseline).unwrap();
        assert_eq!(set.cond[0].c, 3); // two frames + baseline prediction
        assert!(stats.std_for(0) > 0.0);
        let pooled = volume_set_stats(&set.target, Units::Normalized).unwrap();
        assert_relative_eq!(pooled.mean_for(0), 0.0, epsilon = 1e-10);
        assert_relative_eq!(pooled.std_for(0), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn early_stopper_counts_patience_exactly() {
        let mut s = EarlyStopper::new(3);
        assert!(!s.observe(0, 1.0)); // improvement
        assert!(!s.observe(1, 1.1)); // worse x1
        assert!(!s.observe(2, 1.2)); // worse x2
        assert!(s.observe(3, 1.3)); // worse x3 -> stop
        assert_eq!(s.best(), (0, 1.0));
    }

    #[test]
    fn gradient_accumulation_matches_single_batch() {
        let data = toy_set(8, 4, 9);
        let mk_cfg = |batch: usize, accum: usize| TrainConfig {
            epochs: 3,
            batch_size: batch,
            accum_factor: accum,
            val_fraction: 0.25,
            patience: 10,
            seed: 11,
            ..Default::default()
        };
        let run = |cfg: TrainConfig| {
            let (net, _) = train_baseline(&data, &spec(2, 1, 12), &cfg).unwrap();
            net.params().data
        };
        let a = run(mk_cfg(6, 1));
        let b = run(mk_cfg(3, 2));
        let c = run(mk_cfg(1, 6));
        for i in 0..a.len() {
            assert_relative_eq!(a[i], b[i], max_relative = 1e-5, epsilon = 1e-9);
            assert_relative_eq!(a[i], c[i], max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn baseline_learns_toy_mapping_and_stops_early() {
        let data = toy_set(40, 6, 13);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            patience: 8,
            seed: 14,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let (net, report) = train_baseline(&data, &spec(2, 1, 15), &cfg).unwrap();
        assert!(report.best_val_loss < 0.02, "val loss {}", report.best_val_loss);
        // Persistence (latest condition frame) does far worse on this mapping.
        let mut persist = 0.0;
        let mut n = 0.0;
        for i in 0..data.len() {
            let latest = {
                let c = &data.cond[i];
                let mut v = Volume::zeros(1, c.h, c.w);
                v.plane_mut(0).copy_from_slice(c.plane(1));
                v
            };
            persist += latest.sub(&data.target[i]).unwrap().mean_sq();
            n += 1.0;
        }
        assert!(report.best_val_loss < persist / n);
        let _ = net;
    }

    #[test]
    fn diffusion_training_improves_and_conditional_beats_unconditional() {
        let data = toy_set(40, 6, 16);
        let uncond_data = TrainingSet { cond: Vec::new(), target: data.target.clone() };
        // Log-uniform sigma up to 10 so the sigma = 5 comparison below probes
        // a noise level both models actually trained at.
        let sigma_dist = TrainSigmaDist {
            kind: crate::schedule::SigmaDistKind::LogUniform,
            clamp: (0.05, 10.0),
            ..Default::default()
        };
        let setup_cond = DiffusionSetup {
            net_spec: spec(3, 1, 17), // target + 2 condition channels
            precond: PrecondParams::default(),
            sigma_dist: sigma_dist.clone(),
        };
        let setup_uncond = DiffusionSetup {
            net_spec: spec(1, 1, 18),
            precond: PrecondParams::default(),
            sigma_dist,
        };
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            patience: 30,
            seed: 19,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        let (mut cond_net, cond_rep) = train_diffusion(&data, &setup_cond, &cfg).unwrap();
        let (mut uncond_net, _) = train_diffusion(&uncond_data, &setup_uncond, &cfg).unwrap();
        assert!(cond_rep.curve.last().unwrap().val_loss < cond_rep.curve[0].val_loss);

        // At sigma = 5 the conditional model, which can see the answer in its
        // condition channels, must beat the unconditional one.
        let pp = PrecondParams::default();
        let mut rng = seed_rng(20);
        let sigma = 5.0;
        let (mut lc, mut lu) = (0.0, 0.0);
        for i in 0..data.len() {
            let y = &data.target[i];
            let n = normal_volume(&mut rng, 1, y.h, y.w).scaled(sigma);
            lc += wrapped_loss(&mut cond_net, &pp, y, Some(&data.cond[i]), sigma, &n);
            lu += wrapped_loss(&mut uncond_net, &pp, y, None, sigma, &n);
        }
        assert!(lc < lu, "conditional {lc} vs unconditional {lu}");
    }

    fn wrapped_loss(
        net: &mut ConvNet,
        pp: &PrecondParams,
        y: &Volume,
        cond: Option<&Volume>,
        sigma: f64,
        noise: &Volume,
    ) -> f64 {
        denoising_loss_with_grads(net, pp, y, cond, sigma, noise, LossWeighting::Edm).unwrap().0
    }

    #[test]
    fn divergence_reports_last_good_params() {
        let data = toy_set(8, 4, 21);
        // An absurd learning rate drives the loss to overflow within a few steps.
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            patience: 50,
            seed: 22,
            adam: AdamConfig { lr: 1e18, ..Default::default() },
            ..Default::default()
        };
        match train_baseline(&data, &spec(2, 1, 23), &cfg) {
            Err(CoreError::TrainingDiverged { last_good, .. }) => {
                assert!(last_good.is_finite());
            }
            Ok((_, report)) => {
                // If it survives, every reported loss must still be finite.
                assert!(report.curve.iter().all(|e| e.train_loss.is_finite()));
            }
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn two_seeds_differ_but_both_converge() {
        let data = toy_set(16, 4, 24);
        let cfg = TrainConfig { epochs: 4, batch_size: 4, seed: 30, ..Default::default() };
        let cfg2 = TrainConfig { seed: 31, ..cfg.clone() };
        let (a, ra) = train_baseline(&data, &spec(2, 1, 25), &cfg).unwrap();
        let (b, rb) = train_baseline(&data, &spec(2, 1, 25), &cfg2).unwrap();
        assert_ne!(a.params().data, b.params().data);
        assert!(ra.curve.iter().all(|e| e.val_loss.is_finite()));
        assert!(rb.curve.iter().all(|e| e.val_loss.is_finite()));
    }

    #[test]
    fn loss_batch_permutation_invariance() {
        // Mean-of-sample-losses is permutation invariant by construction;
        // check the accumulator agrees under reordering.
        let data = toy_set(6, 4, 26);
        let mut net = ConvNet::regressor(&spec(2, 1, 27)).unwrap();
        let mut acc1 = Accumulator::new(net.num_params());
        let mut acc2 = Accumulator::new(net.num_params());
        let order1 = [0usize, 1, 2, 3, 4, 5];
        let order2 = [5usize, 3, 1, 0, 2, 4];
        for &i in &order1 {
            let pred = net.forward(&data.cond[i], 0.0).unwrap();
            let r = pred.sub(&data.target[i]).unwrap();
            let g = net.backward(&r.scaled(2.0 / r.len() as f64)).unwrap().grads;
            acc1.add(r.mean_sq(), &g);
        }
        for &i in &order2 {
            let pred = net.forward(&data.cond[i], 0.0).unwrap();
            let r = pred.sub(&data.target[i]).unwrap();
            let g = net.backward(&r.scaled(2.0 / r.len() as f64)).unwrap().grads;
            acc2.add(r.mean_sq(), &g);
        }
        let g1 = acc1.take_mean();
        let g2 = acc2.take_mean();
        for i in 0..g1.len() {
            assert_relative_eq!(g1[i], g2[i], max_relative = 1e-12, epsilon = 1e-15);
        }
    }
}
