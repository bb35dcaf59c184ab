//! Adapters between tensor files on disk and the in-memory volumes the
//! pipeline computes on, plus a minimal CSV writer for the report files.

use std::path::Path;

use edmcast_core::tensor::{read_tensor_file, write_tensor_file, Tensor};
use edmcast_core::volume::Volume;
use edmcast_core::{CoreError, Result};

use crate::Failure;

/// Map a core error on user-supplied input to a user failure.
pub fn user_input(e: CoreError) -> Failure {
    Failure::user(e.to_string())
}

/// One multi-channel volume from a rank-3 `[C, H, W]` tensor.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let t = read_tensor_file(path)?;
    match t.dims() {
        [c, h, w] => {
            let mut v = Volume::zeros(*c, *h, *w);
            for (dst, src) in v.data.iter_mut().zip(t.data()) {
                *dst = *src as f64;
            }
            Ok(v)
        }
        d => Err(CoreError::ShapeMismatch(format!(
            "{}: expected [C, H, W], got rank-{} {:?}",
            path.display(),
            d.len(),
            d
        ))),
    }
}

/// A frame sequence: rank-3 `[T, H, W]` reads as T single-channel frames,
/// rank-4 `[T, C, H, W]` as T multi-channel frames.
pub fn load_frames(path: &Path) -> Result<Vec<Volume>> {
    let t = read_tensor_file(path)?;
    let (n, c, h, w) = match t.dims() {
        [n, h, w] => (*n, 1usize, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        d => {
            return Err(CoreError::ShapeMismatch(format!(
                "{}: expected [T, H, W] or [T, C, H, W], got {:?}",
                path.display(),
                d
            )))
        }
    };
    let stride = c * h * w;
    Ok((0..n)
        .map(|i| {
            let mut v = Volume::zeros(c, h, w);
            for (dst, src) in v.data.iter_mut().zip(&t.data()[i * stride..(i + 1) * stride]) {
                *dst = *src as f64;
            }
            v
        })
        .collect())
}

/// Ensemble forecast from disk: rank-4 `[members, leads, H, W]`, or rank-3
/// `[leads, H, W]` promoted to a single member.
pub fn load_member_frames(path: &Path) -> Result<Vec<Vec<Volume>>> {
    let t = read_tensor_file(path)?;
    match t.dims() {
        [_, _, _] => Ok(vec![load_frames(path)?]),
        [m, leads, h, w] => {
            let (m, leads, h, w) = (*m, *leads, *h, *w);
            let stride = h * w;
            let data = t.data();
            Ok((0..m)
                .map(|mi| {
                    (0..leads)
                        .map(|li| {
                            let off = (mi * leads + li) * stride;
                            let mut v = Volume::zeros(1, h, w);
                            for (dst, src) in v.data.iter_mut().zip(&data[off..off + stride]) {
                                *dst = *src as f64;
                            }
                            v
                        })
                        .collect()
                })
                .collect())
        }
        d => Err(CoreError::ShapeMismatch(format!(
            "{}: expected [members, leads, H, W], got {:?}",
            path.display(),
            d
        ))),
    }
}

/// Stack same-shape volumes as `[N, C, H, W]` and write to disk.
pub fn save_stack(path: &Path, vols: &[Volume]) -> Result<()> {
    let first = &vols[0];
    let mut data = Vec::with_capacity(vols.len() * first.len());
    for v in vols {
        if !v.same_shape(first) {
            return Err(CoreError::ShapeMismatch("mixed shapes in output stack".into()));
        }
        data.extend(v.data.iter().map(|&x| x as f32));
    }
    let t = Tensor::new(vec![vols.len(), first.c, first.h, first.w], data)?;
    write_tensor_file(path, &t)
}

pub fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> std::result::Result<(), Failure> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| Failure::internal(format!("write {}: {e}", path.display())))
}
