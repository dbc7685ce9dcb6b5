//! Versioned little-endian `f64` blobs used by checkpoints and
//! decomposition dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QSBLOB01";

/// Write one or more arrays back to back, each prefixed by its length.
pub fn write_arrays(path: &Path, arrays: &[&[f64]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(arrays.len() as u64).to_le_bytes())?;
    for a in arrays {
        w.write_all(&(a.len() as u64).to_le_bytes())?;
        for v in *a {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid(format!("{}: not a parameter blob", path.display())));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n_arrays = u64::from_le_bytes(word) as usize;
    let mut out = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        r.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word) as usize;
        let mut a = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            a.push(f64::from_le_bytes(word));
        }
        out.push(a);
    }
    Ok(out)
}
