//! Grayscale P5 dumps for qualitative panels. Binary PGM is a two-line
//! header plus raw bytes; no image dependency needed.

use std::io::Write;
use std::path::Path;

use edmcast_core::volume::Volume;

use crate::Failure;

/// Write one channel plane, linearly mapped from [lo, hi] to 0..=255.
/// A degenerate range maps everything to mid-gray.
pub fn write_pgm(path: &Path, v: &Volume, channel: usize, lo: f64, hi: f64) -> Result<(), Failure> {
    let plane = v.plane(channel);
    let span = hi - lo;
    let mut buf = Vec::with_capacity(32 + plane.len());
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", v.w, v.h).as_bytes());
    for &p in plane {
        let g = if span > 0.0 { ((p - lo) / span * 255.0).clamp(0.0, 255.0) } else { 127.0 };
        buf.push(g.round() as u8);
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Failure::internal(format!("create {}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Failure::internal(format!("write {}: {e}", path.display())))
}
