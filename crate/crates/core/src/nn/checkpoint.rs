//! Binary parameter checkpoints.
//!
//! Layout: the ASCII header line `TRAJABC-CKPT v1\n`, then per parameter a
//! `u32` name length and UTF-8 name, a `u32` rank followed by `u32` extents,
//! and the row-major values as `f32`. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamRegistry;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "TRAJABC-CKPT";
pub const CHECKPOINT_VERSION: &str = "v1";

pub fn write_checkpoint<W: Write>(registry: &ParamRegistry, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    for (name, t) in registry.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `u32` or reports a clean end of file.
fn read_u32_or_eof<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r
            .read(&mut b[filled..])
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(Error::Checkpoint("truncated file".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamRegistry> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::Checkpoint("missing header line".into()))?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 64 {
            return Err(Error::Checkpoint("header line too long".into()));
        }
    }
    let header = String::from_utf8_lossy(&header);
    match header.split_once(' ') {
        Some((CHECKPOINT_MAGIC, CHECKPOINT_VERSION)) => {}
        Some((CHECKPOINT_MAGIC, other)) => {
            return Err(Error::Checkpoint(format!("unsupported version `{other}`")));
        }
        _ => return Err(Error::Checkpoint(format!("not a checkpoint (header `{header}`)"))),
    }

    let mut reg = ParamRegistry::new();
    while let Some(name_len) = read_u32_or_eof(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated parameter name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated values for `{name}`")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        reg.register(name, Tensor::new(shape, values)?)?;
    }
    Ok(reg)
}

pub fn save_checkpoint(registry: &ParamRegistry, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_checkpoint(registry, BufWriter::new(f))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamRegistry> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_checkpoint(BufReader::new(f))
}
