//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! b"UNLM" | version: u32 | layers: u32 | per layer: in: u32, out: u32
//!        | per layer: weights (out*in f32, row-major) then bias (out f32)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"UNLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> std::io::Result<()> {
    let arch = params.arch();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(arch.num_layers() as u32).to_le_bytes())?;
    for l in 0..arch.num_layers() {
        let (i, o) = arch.layer_shape(l);
        w.write_all(&(i as u32).to_le_bytes())?;
        w.write_all(&(o as u32).to_le_bytes())?;
    }
    // the flat layout already is weights-then-bias per layer
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Option<&'a [u8]> {
    if buf.len() < n {
        return None;
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Some(head)
}

fn u32_at(buf: &mut &[u8]) -> Option<u32> {
    take(buf, 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut r: R, origin: &Path) -> Result<ModelParams> {
    let bad = |m: &str| Error::Checkpoint {
        path: origin.to_path_buf(),
        message: m.to_string(),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing UNLM magic"));
    }
    let version = u32_at(&mut buf).ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let layers = u32_at(&mut buf).ok_or_else(|| bad("truncated header"))? as usize;
    if layers == 0 {
        return Err(bad("zero layers"));
    }
    let mut sizes = Vec::with_capacity(layers + 1);
    for l in 0..layers {
        let i = u32_at(&mut buf).ok_or_else(|| bad("truncated header"))? as usize;
        let o = u32_at(&mut buf).ok_or_else(|| bad("truncated header"))? as usize;
        if l == 0 {
            sizes.push(i);
        } else if sizes[l] != i {
            return Err(bad("layer dims do not chain"));
        }
        sizes.push(o);
    }
    let arch = Architecture::new(sizes).map_err(|e| bad(&e.to_string()))?;
    let n = arch.num_params();
    if buf.len() != n * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", n * 4, buf.len())));
    }
    let data: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    ModelParams::from_vec(&arch, data)
}

/// Atomic save: the checkpoint is written to a sibling temp file, then renamed.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(params, &mut f)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f), path)
}
