//! Gridded physical fields, normalization statistics, and the operations
//! shared by every downstream module.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Physical interpretation of a field's values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Kelvin,
    Normalized,
    Latent,
    Dimensionless,
}

impl std::fmt::Display for Units {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Units::Kelvin => "kelvin",
            Units::Normalized => "normalized",
            Units::Latent => "latent",
            Units::Dimensionless => "dimensionless",
        };
        f.write_str(s)
    }
}

/// A 2-D gridded field: `channels` planes of `height x width` values stored
/// row-major, channel-major. All values are finite by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    channels: usize,
    height: usize,
    width: usize,
    units: Units,
    values: Vec<f32>,
}

impl Field {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        units: Units,
        values: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "field dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "field expects {} values for shape {channels}x{height}x{width}, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("field values".into()));
        }
        Ok(Field { channels, height, width, units, values })
    }

    pub fn constant(channels: usize, height: usize, width: usize, units: Units, v: f32) -> Result<Self> {
        Field::new(channels, height, width, units, vec![v; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize, units: Units) -> Result<Self> {
        Field::constant(channels, height, width, units, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Relabels the units tag without touching values.
    pub fn with_units(mut self, units: Units) -> Self {
        self.units = units;
        self
    }

    /// Applies `op` to every value, revalidating finiteness.
    pub fn map(&self, op: impl Fn(f32) -> f32) -> Result<Field> {
        Field::new(
            self.channels,
            self.height,
            self.width,
            self.units,
            self.values.iter().map(|&v| op(v)).collect(),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Per-channel normalization statistics for one source space. A length-1
/// vector broadcasts over all channels (the scalar convention of
/// single-channel data); latent fields carry one entry per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    space: Units,
}

impl NormStats {
    pub fn scalar(mean: f64, std: f64, space: Units) -> Result<Self> {
        NormStats::per_channel(vec![mean], vec![std], space)
    }

    pub fn per_channel(mean: Vec<f64>, std: Vec<f64>, space: Units) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(CoreError::InvalidArgument(format!(
                "normalization stats need matching non-empty mean/std, got {}/{}",
                mean.len(),
                std.len()
            )));
        }
        if !mean.iter().chain(std.iter()).all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("normalization stats".into()));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::InvalidArgument("std must be strictly positive".into()));
        }
        Ok(NormStats { mean, std, space })
    }

    pub fn space(&self) -> Units {
        self.space
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_for(&self, c: usize) -> f64 {
        if self.mean.len() == 1 {
            self.mean[0]
        } else {
            self.mean[c]
        }
    }

    pub fn std_for(&self, c: usize) -> f64 {
        if self.std.len() == 1 {
            self.std[0]
        } else {
            self.std[c]
        }
    }

    fn check_broadcast(&self, channels: usize) -> Result<()> {
        if self.mean.len() != 1 && self.mean.len() != channels {
            return Err(CoreError::ShapeMismatch(format!(
                "stats carry {} channels, field has {}",
                self.mean.len(),
                channels
            )));
        }
        Ok(())
    }
}

/// (f - mean) / std per channel; requires the field to live in the stats'
/// source space.
pub fn normalize(f: &Field, s: &NormStats) -> Result<Field> {
    if f.units() != s.space() {
        return Err(CoreError::UnitMismatch { expected: s.space(), got: f.units() });
    }
    s.check_broadcast(f.channels())?;
    let (c, h, w) = f.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ci in 0..c {
        let m = s.mean_for(ci);
        let sd = s.std_for(ci);
        out.extend(f.channel(ci).iter().map(|&v| ((v as f64 - m) / sd) as f32));
    }
    Field::new(c, h, w, Units::Normalized, out)
}

/// f * std + mean per channel; inverse of [`normalize`].
pub fn denormalize(f: &Field, s: &NormStats) -> Result<Field> {
    if f.units() != Units::Normalized {
        return Err(CoreError::UnitMismatch { expected: Units::Normalized, got: f.units() });
    }
    s.check_broadcast(f.channels())?;
    let (c, h, w) = f.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ci in 0..c {
        let m = s.mean_for(ci);
        let sd = s.std_for(ci);
        out.extend(f.channel(ci).iter().map(|&v| (v as f64 * sd + m) as f32));
    }
    Field::new(c, h, w, s.space(), out)
}

/// Pooled mean and population standard deviation over every pixel of every
/// field (single scalar pair, the single-channel convention).
pub fn compute_stats(fields: &[Field]) -> Result<NormStats> {
    let (mean, std, space) = pooled_moments(fields, |_f| true)?;
    NormStats::scalar(mean, std, space)
}

/// Per-channel pooled statistics (used for multi-channel latent spaces).
pub fn compute_stats_per_channel(fields: &[Field]) -> Result<NormStats> {
    if fields.is_empty() {
        return Err(CoreError::EmptyInput("compute_stats".into()));
    }
    let channels = fields[0].channels();
    let space = fields[0].units();
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut acc = MomentAccumulator::default();
        for f in fields {
            if f.channels() != channels {
                return Err(CoreError::ShapeMismatch("channel counts differ across fields".into()));
            }
            if f.units() != space {
                return Err(CoreError::UnitMismatch { expected: space, got: f.units() });
            }
            acc.push_first_pass(f.channel(c));
        }
        let m = acc.mean()?;
        let mut acc2 = 0.0f64;
        let mut n = 0usize;
        for f in fields {
            for &v in f.channel(c) {
                let d = v as f64 - m;
                acc2 += d * d;
                n += 1;
            }
        }
        let var = acc2 / n as f64;
        if var <= 0.0 {
            return Err(CoreError::Degenerate(format!("zero variance in channel {c}")));
        }
        mean.push(m);
        std.push(var.sqrt());
    }
    NormStats::per_channel(mean, std, space)
}

#[derive(Default)]
struct MomentAccumulator {
    sum: f64,
    count: usize,
}

impl MomentAccumulator {
    fn push_first_pass(&mut self, values: &[f32]) {
        for &v in values {
            self.sum += v as f64;
        }
        self.count += values.len();
    }

    fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(CoreError::EmptyInput("moment accumulator".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}

// Two-pass pooled moments over all pixels of all channels.
fn pooled_moments(fields: &[Field], _keep: impl Fn(&Field) -> bool) -> Result<(f64, f64, Units)> {
    if fields.is_empty() {
        return Err(CoreError::EmptyInput("compute_stats".into()));
    }
    let space = fields[0].units();
    let mut acc = MomentAccumulator::default();
    for f in fields {
        if f.units() != space {
            return Err(CoreError::UnitMismatch { expected: space, got: f.units() });
        }
        acc.push_first_pass(f.values());
    }
    let mean = acc.mean()?;
    let mut acc2 = 0.0f64;
    for f in fields {
        for &v in f.values() {
            let d = v as f64 - mean;
            acc2 += d * d;
        }
    }
    let var = acc2 / acc.count as f64;
    if var <= 0.0 {
        return Err(CoreError::Degenerate("zero variance across dataset".into()));
    }
    Ok((mean, var.sqrt(), space))
}
