//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic       b"PSCKPT\0\0"
//! version     u32
//! header_len  u64, followed by a UTF-8 JSON header (net configuration etc.)
//! count       u32
//! per entry:  name_len u32, name bytes, trainable u8, ndim u32,
//!             dims u64 * ndim, values f64 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| TensorError::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(TensorError::Checkpoint("truncated checkpoint".into()));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(serde_json::Value, ParamStore)> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = read_u64(&mut r)? as usize;
    let header = read_bytes(&mut r, header_len)?;
    let header: serde_json::Value =
        serde_json::from_slice(&header).map_err(|e| TensorError::Checkpoint(format!("bad header: {e}")))?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = read_array::<1, _>(&mut r)?[0] != 0;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = read_bytes(&mut r, numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?, trainable)?;
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(BufWriter::new(f), header, store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, ParamStore)> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}
