//! Binary checkpoints: `FLPN` magic, format version, layout fingerprint,
//! element count, then little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamLayout, ParamVector};

const MAGIC: &[u8; 4] = b"FLPN";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub fingerprint: u64,
    pub len: u64,
}

pub fn save_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&params.layout.fingerprint().to_le_bytes())?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    r.read_exact(&mut b8)?;
    let fingerprint = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8);
    Ok(CheckpointHeader {
        version,
        fingerprint,
        len,
    })
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    read_header_from(&mut BufReader::new(File::open(path)?))
}

/// Loads a checkpoint written for `layout`; a layout mismatch is an error.
pub fn load_checkpoint(path: &Path, layout: &ParamLayout) -> Result<ParamVector> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header_from(&mut r)?;
    if h.fingerprint != layout.fingerprint() || h.len as usize != layout.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint layout (fingerprint {:016x}, {} values) does not match config (fingerprint {:016x}, {} values)",
            h.fingerprint,
            h.len,
            layout.fingerprint(),
            layout.len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len());
    let mut b8 = [0u8; 8];
    for _ in 0..h.len {
        r.read_exact(&mut b8)?;
        values.push(f64::from_le_bytes(b8));
    }
    Ok(ParamVector {
        layout: layout.clone(),
        values,
    })
}
