//! QTF: a minimal little-endian tensor container.
//!
//! ```text
//! "QTF1" | dtype u8 (1 = f32, 2 = f64) | rank u8 | reserved u16 = 0
//!        | rank × u64 dims | row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{QksError, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"QTF1";
const FIXED_HEADER: usize = 8;

/// Decoded header fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER + 8 * self.shape.len()
    }

    pub fn payload_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size()
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let rank = t.shape().len();
    let mut out = Vec::with_capacity(FIXED_HEADER + 8 * rank + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(rank as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(QksError::Format(format!("magic {got:?} is not \"QTF1\"")));
    }
    if bytes.len() < FIXED_HEADER {
        return Err(QksError::Corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let dtype = DType::from_code(bytes[4]).ok_or(QksError::Version(bytes[4]))?;
    let rank = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(QksError::Format("reserved header bytes are not zero".into()));
    }
    let dims_end = FIXED_HEADER + 8 * rank;
    if bytes.len() < dims_end {
        return Err(QksError::Corrupt(format!(
            "header declares rank {rank} but file has {} bytes",
            bytes.len()
        )));
    }
    let shape: Vec<usize> = bytes[FIXED_HEADER..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok(Header { dtype, shape })
}

/// Decode and convert to `T` (exact when the stored dtype is `T`).
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let header = decode_header(bytes)?;
    let start = header.encoded_len();
    let expected = header
        .shape
        .iter()
        .try_fold(header.dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| QksError::Corrupt(format!("shape {:?} overflows", header.shape)))?;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(QksError::Corrupt(format!(
            "payload is {actual} bytes, shape {:?} of {:?} needs {expected}",
            header.shape, header.dtype
        )));
    }
    let payload = &bytes[start..];
    let data: Vec<T> = match header.dtype {
        DType::Float32 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::Float64 => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(header.shape, data).map_err(|e| QksError::Corrupt(e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| QksError::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| QksError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        QksError::Format(m) => QksError::Format(format!("{}: {m}", path.display())),
        QksError::Corrupt(m) => QksError::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Header of a file without reading its payload into tensors.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| QksError::io(path, e))?;
    let mut head = vec![0u8; FIXED_HEADER];
    f.read_exact(&mut head).map_err(|e| QksError::io(path, e))?;
    let rank = head[5] as usize;
    let mut dims = vec![0u8; 8 * rank];
    f.read_exact(&mut dims).map_err(|e| QksError::io(path, e))?;
    head.extend_from_slice(&dims);
    decode_header(&head)
}
