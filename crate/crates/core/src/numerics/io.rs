//! `M3T1` tensor files.
//!
//! Layout: magic `M3T1`, `u32` LE rank, `rank × u32` LE extents, then the
//! row-major payload as LE `f64`. Readers ignore trailing bytes, which is how
//! checkpoint containers append their index.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"M3T1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor from the front of `bytes`, returning it together with the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    cursor
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut cursor)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(&mut cursor).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if cursor.len() < 8 * n {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            cursor.len(),
            8 * n
        )));
    }
    let data = cursor[..8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let consumed = 8 + 4 * rank + 8 * n;
    Ok((Tensor::new(shape, data)?, consumed))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    decode_prefix(bytes).map(|(t, _)| t)
}

fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    cursor
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
