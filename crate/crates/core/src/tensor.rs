//! The `EDMT` on-disk tensor format: little-endian f32 payloads of rank 1-4,
//! bit-exact across round-trips.
//!
//! Layout: magic `EDMT` | u16 LE version = 1 | u8 dtype (1 = f32 LE) |
//! u8 rank (1-4) | rank x u32 LE dims | row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::field::{Field, Units};

const MAGIC: &[u8; 4] = b"EDMT";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const MAX_RANK: usize = 4;

/// An in-memory tensor of rank 1-4 with finite f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(CoreError::TensorFormat(format!(
                "rank must be 1-{MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(CoreError::TensorFormat("zero-length dimension".into()));
        }
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(CoreError::ShapeMismatch(format!(
                "tensor dims {dims:?} need {expect} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("tensor payload".into()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn from_field(f: &Field) -> Tensor {
        let (c, h, w) = f.shape();
        Tensor { dims: vec![c, h, w], data: f.values().to_vec() }
    }

    /// Rank-3 tensor as a single [c, h, w] field.
    pub fn to_field(&self, units: Units) -> Result<Field> {
        if self.rank() != 3 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected rank-3 tensor for a field, got rank {}",
                self.rank()
            )));
        }
        Field::new(self.dims[0], self.dims[1], self.dims[2], units, self.data.clone())
    }

    /// Stacks same-shape fields into a rank-4 [n, c, h, w] tensor.
    pub fn from_batch(fields: &[Field]) -> Result<Tensor> {
        if fields.is_empty() {
            return Err(CoreError::EmptyInput("tensor batch".into()));
        }
        let shape = fields[0].shape();
        let mut data = Vec::with_capacity(fields.len() * fields[0].values().len());
        for f in fields {
            if f.shape() != shape {
                return Err(CoreError::ShapeMismatch("batch fields differ in shape".into()));
            }
            data.extend_from_slice(f.values());
        }
        Tensor::new(vec![fields.len(), shape.0, shape.1, shape.2], data)
    }

    /// Rank-4 tensor as a list of [c, h, w] fields.
    pub fn to_batch(&self, units: Units) -> Result<Vec<Field>> {
        if self.rank() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected rank-4 tensor for a batch, got rank {}",
                self.rank()
            )));
        }
        let (n, c, h, w) = (self.dims[0], self.dims[1], self.dims[2], self.dims[3]);
        let per = c * h * w;
        (0..n)
            .map(|i| Field::new(c, h, w, units, self.data[i * per..(i + 1) * per].to_vec()))
            .collect()
    }
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[DTYPE_F32, t.rank() as u8])?;
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| CoreError::TensorFormat(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let mut input = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CoreError::TensorFormat(format!("bad magic bytes {magic:?}")));
    }
    let mut head = [0u8; 4];
    read_exact(&mut input, &mut head, "header")?;
    let version = u16::from_le_bytes([head[0], head[1]]);
    if version != VERSION {
        return Err(CoreError::TensorFormat(format!("unsupported version {version}")));
    }
    if head[2] != DTYPE_F32 {
        return Err(CoreError::TensorFormat(format!("unsupported dtype code {}", head[2])));
    }
    let rank = head[3] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(CoreError::TensorFormat(format!("rank {rank} outside 1-{MAX_RANK}")));
    }

    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(&mut input, &mut b, "dims")?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(CoreError::TensorFormat("zero-length dimension".into()));
    }
    let count: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
        || CoreError::TensorFormat("dimension product overflows".into()),
    )?;

    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(CoreError::TensorFormat(format!(
            "payload holds {} bytes, header declares {}",
            payload.len(),
            count * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite("tensor payload".into()));
    }
    Ok(Tensor { dims, data })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| CoreError::TensorFormat(format!("truncated file while reading {what}")))
}
