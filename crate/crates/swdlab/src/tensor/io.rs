//! "SWT1" binary tensor container.
//!
//! Layout: magic `SWT1`, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! rank little-endian u32 dims, then the row-major little-endian payload.
//! In memory everything is f64; f32 files widen on load.

use super::{numel_of, Result, Tensor, TensorError};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

const MAGIC: &[u8; 4] = b"SWT1";

fn io_err<E: std::fmt::Display>(path: &Path, e: E) -> TensorError {
    TensorError::Io(format!("{}: {e}", path.display()))
}

fn write_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(16 + tensor.numel() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(dtype.code());
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(TensorError::InvalidShape {
            op: "save_swt1",
            shape: tensor.shape().to_vec(),
            reason: "rank exceeds u8".into(),
        });
    }
    buf.push(rank as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

pub fn save_swt1<P: AsRef<Path>>(path: P, tensor: &Tensor) -> Result<()> {
    write_tensor(path.as_ref(), tensor, Dtype::F64)
}

pub fn save_swt1_f32<P: AsRef<Path>>(path: P, tensor: &Tensor) -> Result<()> {
    write_tensor(path.as_ref(), tensor, Dtype::F32)
}

pub fn load_swt1<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(io_err(path, "not an SWT1 file"));
    }
    let dtype = match bytes[4] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return Err(io_err(path, format!("unknown dtype code {c}"))),
    };
    let rank = bytes[5] as usize;
    let header = 6 + rank * 4;
    if bytes.len() < header {
        return Err(io_err(path, "truncated dimension header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + i * 4;
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(dim);
    }
    let n = numel_of(&shape);
    let elem = if dtype == Dtype::F32 { 4 } else { 8 };
    if bytes.len() != header + n * elem {
        return Err(io_err(
            path,
            format!("payload size {} does not match shape {shape:?}", bytes.len() - header),
        ));
    }
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F32 => {
            for i in 0..n {
                let off = header + i * 4;
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for i in 0..n {
                let off = header + i * 8;
                data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            }
        }
    }
    Tensor::from_vec(data, &shape).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.swt1");
        let mut rng = Rng::new(3, 0);
        let t = Tensor::gaussian(&[3, 4, 5], &mut rng).unwrap();
        save_swt1(&p, &t).unwrap();
        let back = load_swt1(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn f32_round_trip_widens() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t32.swt1");
        let t = Tensor::from_vec(vec![1.5, -2.25, 0.125, 3.0], &[2, 2]).unwrap();
        save_swt1_f32(&p, &t).unwrap();
        let back = load_swt1(&p).unwrap();
        assert_eq!(back.data(), t.data()); // exactly representable in f32
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.swt1");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(load_swt1(&p).is_err());
    }
}
