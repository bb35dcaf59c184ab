//! Radially averaged Fourier power spectra and fractional spectral change.

use crate::error::{CoreError, Result};
use crate::volume::Volume;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;

/// Agreement between summed binned power and pixel-domain variance expected
/// on band-limited fields. Broadband fields lose the corner modes (radial
/// wavenumber beyond N/2 never enters a bin), so they miss this gate.
pub const PARSEVAL_TOL: f64 = 0.01;

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumConfig {
    /// Grid spacing in km.
    pub pixel_km: f64,
    /// 2-D Hann window before the transform, for aperiodic real data. Off by
    /// default: the toy world is periodic, so raw spectra are already exact.
    pub hann: bool,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig { pixel_km: 2.0, hann: false }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    /// Bin k covers integer radial wavenumber k = 1..=N/2; wavelengths run
    /// from the domain size (k=1) down to two pixels (k=N/2).
    pub wavelength_km: Vec<f64>,
    pub power: Vec<f64>,
    /// Per-bin forecast power / reference power; `fractional_change` only.
    pub fractional: Option<Vec<f64>>,
}

fn check_square(field: &Volume) -> Result<usize> {
    if field.c != 1 {
        return Err(CoreError::ShapeMismatch(format!(
            "spectrum wants a single channel, got {}",
            field.c
        )));
    }
    if field.h != field.w {
        return Err(CoreError::ShapeMismatch(format!(
            "spectrum wants a square field, got {}x{}",
            field.h, field.w
        )));
    }
    if field.h < 4 {
        return Err(CoreError::InvalidArgument("field too small for a spectrum".into()));
    }
    Ok(field.h)
}

fn fft2(data: &mut [Complex<f64>], n: usize) {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::default(); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = data[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            data[y * n + x] = col[y];
        }
    }
}

/// Power per integer radial wavenumber, normalized so the bins sum to the
/// field's pixel variance (up to binning loss). DC is excluded.
pub fn radial_spectrum(field: &Volume, cfg: &SpectrumConfig) -> Result<SpectrumReport> {
    if !(cfg.pixel_km > 0.0 && cfg.pixel_km.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("pixel size {} km", cfg.pixel_km)));
    }
    let n = check_square(field)?;
    let mean = field.data.iter().sum::<f64>() / field.data.len() as f64;

    let mut buf: Vec<Complex<f64>> =
        field.data.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    // Window power correction keeps broadband levels comparable: divide the
    // spectrum by mean(w^2).
    let mut w2_mean = 1.0;
    if cfg.hann {
        let hann: Vec<f64> = (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
            .collect();
        let mut w2 = 0.0;
        for y in 0..n {
            for x in 0..n {
                let w = hann[y] * hann[x];
                buf[y * n + x] *= w;
                w2 += w * w;
            }
        }
        w2_mean = w2 / (n * n) as f64;
    }
    fft2(&mut buf, n);

    let half = n / 2;
    let mut power = vec![0.0; half];
    let norm = ((n * n) as f64).powi(2) * w2_mean;
    for ky in 0..n {
        let fy = if ky <= half { ky as f64 } else { ky as f64 - n as f64 };
        for kx in 0..n {
            if ky == 0 && kx == 0 {
                continue;
            }
            let fx = if kx <= half { kx as f64 } else { kx as f64 - n as f64 };
            let k = (fy * fy + fx * fx).sqrt().round() as usize;
            if (1..=half).contains(&k) {
                power[k - 1] += buf[ky * n + kx].norm_sqr() / norm;
            }
        }
    }
    let wavelength_km = (1..=half).map(|k| n as f64 * cfg.pixel_km / k as f64).collect();
    Ok(SpectrumReport { wavelength_km, power, fractional: None })
}

/// Per-bin power ratio forecast/truth. Bins empty in both spectra count as
/// unchanged (ratio 1).
pub fn fractional_change(
    forecast: &Volume,
    truth: &Volume,
    cfg: &SpectrumConfig,
) -> Result<SpectrumReport> {
    if !forecast.same_shape(truth) {
        return Err(CoreError::ShapeMismatch("forecast/truth shapes differ".into()));
    }
    let fc = radial_spectrum(forecast, cfg)?;
    let tr = radial_spectrum(truth, cfg)?;
    let fractional = fc
        .power
        .iter()
        .zip(&tr.power)
        .map(|(&f, &t)| {
            if t == 0.0 {
                if f == 0.0 {
                    1.0
                } else {
                    f64::INFINITY
                }
            } else {
                f / t
            }
        })
        .collect();
    Ok(SpectrumReport { fractional: Some(fractional), ..fc })
}
