//! Binary tensor records: length-prefixed UTF-8 name, dtype tag, rank,
//! u64 dims and a little-endian f64 payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const DTYPE_F64: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor record".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Format(format!("tensor name length {name_len} is implausible")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|_| Error::Format("truncated tensor name".into()))?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
    let [dtype] = read_array::<1, _>(r)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Format(format!("tensor {name}: unsupported dtype tag {dtype}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor {name}: rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::Format(format!("tensor {name}: shape {shape:?} is implausible")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_array(r)?));
    }
    Ok((name, Tensor::new(shape, data)?))
}
