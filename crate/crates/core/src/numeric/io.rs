//! `SELDTNSR` binary tensor format: magic, `u32` rank, `u64` extents, then a
//! little-endian `f32` payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Result, SeldError};

pub const MAGIC: &[u8; 8] = b"SELDTNSR";

pub fn write_tensor<T: Float, W: Write>(t: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()
}

pub fn read_tensor<T: Float, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let bad = |e: std::io::Error| SeldError::Input(format!("truncated tensor: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(SeldError::Input("bad tensor magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(bad)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(bad)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(bad)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| SeldError::io(path, e))?;
    write_tensor(t, BufWriter::new(f)).map_err(|e| SeldError::io(path, e))
}

pub fn load_tensor<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let f = File::open(path).map_err(|e| SeldError::io(path, e))?;
    read_tensor(BufReader::new(f))
}
