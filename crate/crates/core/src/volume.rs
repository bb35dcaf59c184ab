//! f64 compute-side counterpart of [`Field`]: network activations, sampler
//! state, and gradients all live here; f32 fields are the storage boundary.

use crate::error::{CoreError, Result};
use crate::field::{Field, Units};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(c: usize, h: usize, w: usize) -> Volume {
        Volume { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_field(f: &Field) -> Volume {
        let (c, h, w) = f.shape();
        Volume { c, h, w, data: f.values().iter().map(|&v| v as f64).collect() }
    }

    /// Casts down to f32 storage; errors if the cast overflows to infinity.
    pub fn to_field(&self, units: Units) -> Result<Field> {
        Field::new(self.c, self.h, self.w, units, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks volumes along the channel axis.
    pub fn concat_channels(parts: &[&Volume]) -> Result<Volume> {
        if parts.is_empty() {
            return Err(CoreError::EmptyInput("concat_channels".into()));
        }
        let (h, w) = (parts[0].h, parts[0].w);
        let mut c = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(CoreError::ShapeMismatch("channel concat needs equal planes".into()));
            }
            c += p.c;
        }
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Volume { c, h, w, data })
    }

    pub fn scaled(&self, k: f64) -> Volume {
        Volume { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| v * k).collect() }
    }

    /// self += k * other (shapes must match).
    pub fn add_scaled(&mut self, other: &Volume, k: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(CoreError::ShapeMismatch("add_scaled shape".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Volume) -> Result<Volume> {
        if !self.same_shape(other) {
            return Err(CoreError::ShapeMismatch("sub shape".into()));
        }
        Ok(Volume {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Volume) -> Result<Volume> {
        if !self.same_shape(other) {
            return Err(CoreError::ShapeMismatch("add shape".into()));
        }
        Ok(Volume {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn mean_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}
