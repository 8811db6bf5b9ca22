//! Raw tensor block: `CSDT`, u32 version, u32 rank, rank × u64 extents,
//! then the little-endian f32 payload in row-major order.

use std::io::{Read, Write};

use super::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CSDT";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&4u32.to_le_bytes())?;
    for e in t.shape().0 {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("bad tensor magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported tensor version {0}")]
    Version(u32),
    #[error("unsupported tensor rank {0}")]
    Rank(u32),
    #[error("invalid tensor extents {0:?}")]
    Extents(Vec<u64>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads one tensor block. Ranks below 4 are left-padded with unit extents.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, DumpError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(DumpError::Magic(magic));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(DumpError::Version(version));
    }
    let rank = read_u32(r)?;
    if rank == 0 || rank > 4 {
        return Err(DumpError::Rank(rank));
    }
    let extents = (0..rank).map(|_| read_u64(r)).collect::<std::io::Result<Vec<_>>>()?;
    if extents.iter().any(|&e| e == 0 || e > u32::MAX as u64) {
        return Err(DumpError::Extents(extents));
    }
    let mut dims = [1usize; 4];
    for (d, &e) in dims[4 - rank as usize..].iter_mut().zip(&extents) {
        *d = e as usize;
    }
    let shape = Shape(dims);
    let numel = shape.numel();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|_| DumpError::Extents(extents))
}
