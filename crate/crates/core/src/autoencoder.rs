//! Pluggable codec for latent diffusion: an identity codec, a small trainable
//! conv autoencoder (optionally variational), the reconstruction-metric
//! harness, and latent-space generation that encodes conditions and decodes
//! samples.

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{CoreError, Result};
use crate::field::NormStats;
use crate::network::{Activation, ConvNet, ConvNetSpec};
use crate::precond::Denoiser;
use crate::rng::{normal_volume, seed_rng, substream};
use crate::sampler::{generate, SampleConfig, Trajectory};
use crate::training::{tail_split, Accumulator, EarlyStopper, EpochLoss, TrainConfig, TrainReport};
use crate::volume::Volume;

/// Deterministic codec contract. Implementations must be safe for concurrent
/// read-only use so ensembles can share one instance.
pub trait Autoencoder: Sync {
    fn encode(&self, x: &Volume) -> Result<Volume>;
    fn decode(&self, z: &Volume) -> Result<Volume>;
    /// Spatial downscaling factor (1 = none).
    fn compression(&self) -> usize;
    fn latent_channels(&self) -> usize;
}

/// Pass-through codec: latent space == data space.
pub struct IdentityAe {
    channels: usize,
}

impl IdentityAe {
    pub fn new(channels: usize) -> IdentityAe {
        IdentityAe { channels }
    }
}

impl Autoencoder for IdentityAe {
    fn encode(&self, x: &Volume) -> Result<Volume> {
        if x.c != self.channels {
            return Err(CoreError::ShapeMismatch(format!(
                "identity codec set up for {} channels, got {}",
                self.channels, x.c
            )));
        }
        Ok(x.clone())
    }

    fn decode(&self, z: &Volume) -> Result<Volume> {
        self.encode(z)
    }

    fn compression(&self) -> usize {
        1
    }

    fn latent_channels(&self) -> usize {
        self.channels
    }
}

/// Adapter running a normalized-space codec on physical-space volumes.
pub struct NormalizedAe<'a> {
    pub inner: &'a dyn Autoencoder,
    pub stats: NormStats,
}

impl Autoencoder for NormalizedAe<'_> {
    fn encode(&self, x: &Volume) -> Result<Volume> {
        let mut n = x.clone();
        for c in 0..n.c {
            let (mu, sd) = (self.stats.mean_for(c), self.stats.std_for(c));
            for v in n.plane_mut(c) {
                *v = (*v - mu) / sd;
            }
        }
        self.inner.encode(&n)
    }

    fn decode(&self, z: &Volume) -> Result<Volume> {
        let mut out = self.inner.decode(z)?;
        for c in 0..out.c {
            let (mu, sd) = (self.stats.mean_for(c), self.stats.std_for(c));
            for v in out.plane_mut(c) {
                *v = *v * sd + mu;
            }
        }
        Ok(out)
    }

    fn compression(&self) -> usize {
        self.inner.compression()
    }

    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TinyAeSpec {
    pub data_channels: usize,
    /// Spatial compression, a power of two in {1, 2, 4}.
    pub compression: usize,
    pub latent_channels: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub param_seed: u64,
    /// KL-regularized variational variant (encode still returns the mean, so
    /// the codec stays deterministic downstream).
    pub variational: bool,
    pub kl_weight: f64,
}

impl Default for TinyAeSpec {
    fn default() -> Self {
        TinyAeSpec {
            data_channels: 1,
            compression: 2,
            latent_channels: 4,
            hidden: vec![8],
            activation: Activation::Silu,
            param_seed: 0,
            variational: false,
            kl_weight: 1e-3,
        }
    }
}

impl TinyAeSpec {
    fn depth(&self) -> Result<usize> {
        match self.compression {
            1 => Ok(0),
            2 => Ok(1),
            4 => Ok(2),
            other => Err(CoreError::InvalidArgument(format!(
                "compression must be 1, 2, or 4; got {other}"
            ))),
        }
    }
}

/// Conv encoder/decoder pair. The encoder emits 2x latent channels when
/// variational (mean ++ log-variance); `encode` always returns the mean.
pub struct TinyAe {
    encoder: ConvNet,
    decoder: ConvNet,
    spec: TinyAeSpec,
}

impl TinyAe {
    pub fn new(spec: &TinyAeSpec) -> Result<TinyAe> {
        let depth = spec.depth()?;
        if spec.latent_channels == 0 || spec.data_channels == 0 {
            return Err(CoreError::InvalidArgument("channel counts must be positive".into()));
        }
        let enc_out = if spec.variational { 2 * spec.latent_channels } else { spec.latent_channels };
        let encoder = ConvNet::encoder(&ConvNetSpec {
            in_channels: spec.data_channels,
            out_channels: enc_out,
            hidden: spec.hidden.clone(),
            downsample_depth: depth,
            activation: spec.activation,
            param_seed: spec.param_seed,
        })?;
        let decoder = ConvNet::decoder(&ConvNetSpec {
            in_channels: spec.latent_channels,
            out_channels: spec.data_channels,
            hidden: spec.hidden.clone(),
            downsample_depth: depth,
            activation: spec.activation,
            param_seed: spec.param_seed.wrapping_add(1),
        })?;
        Ok(TinyAe { encoder, decoder, spec: spec.clone() })
    }

    pub fn spec(&self) -> &TinyAeSpec {
        &self.spec
    }

    fn split_mean(&self, z_pre: &Volume) -> Volume {
        if !self.spec.variational {
            return z_pre.clone();
        }
        let k = self.spec.latent_channels;
        let mut mean = Volume::zeros(k, z_pre.h, z_pre.w);
        for c in 0..k {
            mean.plane_mut(c).copy_from_slice(z_pre.plane(c));
        }
        mean
    }

    pub fn save_checkpoint(&self, prefix: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_value(&self.spec)?;
        self.encoder.save_checkpoint(&suffixed(prefix, "-enc"), meta.clone())?;
        self.decoder.save_checkpoint(&suffixed(prefix, "-dec"), meta)?;
        Ok(())
    }

    pub fn load_checkpoint(prefix: &std::path::Path) -> Result<TinyAe> {
        let (encoder, meta) = ConvNet::load_checkpoint(&suffixed(prefix, "-enc"))?;
        let (decoder, _) = ConvNet::load_checkpoint(&suffixed(prefix, "-dec"))?;
        let spec: TinyAeSpec = serde_json::from_value(meta)?;
        Ok(TinyAe { encoder, decoder, spec })
    }
}

fn suffixed(prefix: &std::path::Path, suffix: &str) -> std::path::PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

impl Autoencoder for TinyAe {
    fn encode(&self, x: &Volume) -> Result<Volume> {
        let z_pre = self.encoder.forward_inference(x, 0.0)?;
        Ok(self.split_mean(&z_pre))
    }

    fn decode(&self, z: &Volume) -> Result<Volume> {
        self.decoder.forward_inference(z, 0.0)
    }

    fn compression(&self) -> usize {
        self.spec.compression
    }

    fn latent_channels(&self) -> usize {
        self.spec.latent_channels
    }
}

/// Reconstruction metrics pooled over all pixels of a dataset. Bias follows
/// the truth-minus-estimate convention: mean(original - reconstruction).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconReport {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Largest absolute pixel error of each image.
    pub worst_pixel: Vec<f64>,
    pub images: usize,
}

pub fn evaluate_reconstruction(ae: &dyn Autoencoder, data: &[Volume]) -> Result<ReconReport> {
    if data.is_empty() {
        return Err(CoreError::EmptyInput("reconstruction dataset".into()));
    }
    let mut sum = 0.0;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    let mut worst_pixel = Vec::with_capacity(data.len());
    for x in data {
        let recon = ae.decode(&ae.encode(x)?)?;
        if !recon.same_shape(x) {
            return Err(CoreError::ShapeMismatch(format!(
                "codec returned {}x{}x{} for {}x{}x{} input",
                recon.c, recon.h, recon.w, x.c, x.h, x.w
            )));
        }
        let mut worst = 0.0f64;
        for (a, b) in x.data.iter().zip(&recon.data) {
            let e = a - b;
            sum += e;
            sum_abs += e.abs();
            sum_sq += e * e;
            worst = worst.max(e.abs());
        }
        worst_pixel.push(worst);
        n += x.len();
    }
    let m = n as f64;
    Ok(ReconReport {
        bias: sum / m,
        mae: sum_abs / m,
        rmse: (sum_sq / m).sqrt(),
        worst_pixel,
        images: data.len(),
    })
}

/// MSE-trains the codec (plus a KL term when variational). Data is expected
/// normalized; the loop mirrors the diffusion trainer: tail validation split,
/// Adam, early stopping, best-epoch restore.
pub fn train_autoencoder(
    data: &[Volume],
    spec: &TinyAeSpec,
    cfg: &TrainConfig,
) -> Result<(TinyAe, TrainReport)> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(CoreError::EmptyInput("need at least 2 samples to split".into()));
    }
    let mut ae = TinyAe::new(spec)?;
    let (n_train, n_val) = tail_split(data.len(), cfg.val_fraction);
    let n_enc = ae.encoder.num_params();
    let n_params = n_enc + ae.decoder.num_params();

    let mut adam = Adam::new(cfg.adam, n_params)?;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut curve = Vec::new();
    let mut best = (ae.encoder.params().data, ae.decoder.params().data);
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seed_rng(substream(cfg.seed, "ae-shuffle", epoch as u64)));
        let mut rng = seed_rng(substream(cfg.seed, "ae-draws", epoch as u64));

        let mut acc = Accumulator::new(n_params);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size * cfg.accum_factor) {
            for &i in chunk {
                let (loss, grads) = ae_sample_grads(&mut ae, &data[i], &mut rng)?;
                if !loss.is_finite() || !grads.iter().all(|g| g.is_finite()) {
                    return Err(CoreError::TrainingDiverged {
                        epoch,
                        last_good: Box::new(crate::network::ParamVector {
                            data: [best.0.clone(), best.1.clone()].concat(),
                            layout: Vec::new(),
                        }),
                    });
                }
                acc.add_raw(loss, &grads);
            }
            epoch_loss += acc.loss_sum;
            seen += acc.count;
            let mean = acc.take_mean();
            let mut params = [ae.encoder.params().data, ae.decoder.params().data].concat();
            adam.step(&mut params, &mean)?;
            ae.encoder.set_params(&params[..n_enc])?;
            ae.decoder.set_params(&params[n_enc..])?;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;

        // Validation: plain reconstruction MSE, deterministic (mean latent).
        let mut val_loss = 0.0;
        for x in &data[n_train..] {
            let recon = ae.decode(&ae.encode(x)?)?;
            val_loss += recon.sub(x)?.mean_sq();
        }
        val_loss /= n_val as f64;
        curve.push(EpochLoss { epoch, train_loss, val_loss });

        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved() {
            best = (ae.encoder.params().data, ae.decoder.params().data);
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    ae.encoder.set_params(&best.0)?;
    ae.decoder.set_params(&best.1)?;
    let (best_epoch, best_val_loss) = stopper.best();
    Ok((ae, TrainReport { curve, best_epoch, best_val_loss, stopped_early }))
}

/// One sample's loss and [encoder ++ decoder] gradient.
fn ae_sample_grads(
    ae: &mut TinyAe,
    x: &Volume,
    rng: &mut crate::rng::Stream,
) -> Result<(f64, Vec<f64>)> {
    let z_pre = ae.encoder.forward(x, 0.0)?;
    let m = x.len() as f64;

    if !ae.spec.variational {
        let recon = ae.decoder.forward(&z_pre, 0.0)?;
        let residual = recon.sub(x)?;
        let loss = residual.mean_sq();
        let dec_back = ae.decoder.backward(&residual.scaled(2.0 / m))?;
        let enc_back = ae.encoder.backward(&dec_back.input_grad)?;
        return Ok((loss, [enc_back.grads.data, dec_back.grads.data].concat()));
    }

    // Variational path: z_pre = mean ++ logvar, z = mean + exp(logvar/2)*eps,
    // loss = MSE + kl_weight * mean KL(N(mean, var) || N(0, 1)).
    let k = ae.spec.latent_channels;
    let (zh, zw) = (z_pre.h, z_pre.w);
    let plane_len = zh * zw;
    let eps = normal_volume(rng, k, zh, zw);
    let mut z = Volume::zeros(k, zh, zw);
    let mut kl = 0.0;
    for c in 0..k {
        for i in 0..plane_len {
            let mu = z_pre.plane(c)[i];
            let lv = z_pre.plane(k + c)[i];
            z.plane_mut(c)[i] = mu + (0.5 * lv).exp() * eps.plane(c)[i];
            kl += -0.5 * (1.0 + lv - mu * mu - lv.exp());
        }
    }
    let mz = z.len() as f64;
    let kl_term = ae.spec.kl_weight * kl / mz;

    let recon = ae.decoder.forward(&z, 0.0)?;
    let residual = recon.sub(x)?;
    let loss = residual.mean_sq() + kl_term;

    let dec_back = ae.decoder.backward(&residual.scaled(2.0 / m))?;
    let dz = dec_back.input_grad;

    // dL/dmean = dL/dz + kl'; dL/dlogvar = dL/dz * eps * exp(logvar/2)/2 + kl'.
    let mut dz_pre = Volume::zeros(2 * k, zh, zw);
    for c in 0..k {
        for i in 0..plane_len {
            let mu = z_pre.plane(c)[i];
            let lv = z_pre.plane(k + c)[i];
            let gz = dz.plane(c)[i];
            dz_pre.plane_mut(c)[i] = gz + ae.spec.kl_weight * mu / mz;
            dz_pre.plane_mut(k + c)[i] = gz * eps.plane(c)[i] * 0.5 * (0.5 * lv).exp()
                + ae.spec.kl_weight * (-0.5) * (1.0 - lv.exp()) / mz;
        }
    }
    let enc_back = ae.encoder.backward(&dz_pre)?;
    Ok((loss, [enc_back.grads.data, dec_back.grads.data].concat()))
}

/// Latent-space generation: encode the condition, run the sampling loop in
/// latent shape, decode the result. With the identity codec this is
/// bit-identical to plain generation.
pub fn generate_latent(
    denoiser: &dyn Denoiser,
    ae: &dyn Autoencoder,
    cond: Option<&Volume>,
    data_shape: (usize, usize, usize),
    cfg: &SampleConfig,
) -> Result<(Volume, Trajectory)> {
    let (_, h, w) = data_shape;
    let f = ae.compression();
    if h % f != 0 || w % f != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "data shape {h}x{w} not divisible by compression {f}"
        )));
    }
    let enc_cond = match cond {
        Some(c) => Some(ae.encode(c)?),
        None => None,
    };
    let latent_shape = (ae.latent_channels(), h / f, w / f);
    let (z, traj) = generate(denoiser, enc_cond.as_ref(), latent_shape, cfg)?;
    Ok((ae.decode(&z)?, traj))
}
