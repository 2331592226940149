//! Binary tensor fixtures: magic `SPT1`, `u32` rank, `u32` dims, then
//! little-endian `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Result, SptError};

pub const MAGIC: &[u8; 4] = b"SPT1";

/// Encoded size in bytes of a tensor of this shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write_tensor<T: Real, W: Write>(out: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn format_err(detail: impl Into<String>) -> SptError {
    SptError::Format {
        what: "tensor fixture",
        detail: detail.into(),
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input
        .read_exact(&mut b)
        .map_err(|e| format_err(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| format_err(e.to_string()))?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(input)? as usize;
    if rank > 16 {
        return Err(format_err(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; 4 * n];
    input
        .read_exact(&mut bytes)
        .map_err(|e| format_err(format!("payload: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| SptError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| SptError::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| SptError::io(path, e))?;
    read_tensor(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"SPT1");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), encoded_len(t.shape()));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = b"SPT2".to_vec();
        buf.extend(0u32.to_le_bytes());
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
        let t = Tensor::<f32>::zeros(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32 * 1e-3).sin()).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
