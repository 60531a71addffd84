//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "CTQWCKPT"
//! version  u32      1
//! count    u32      number of parameters
//! count × {
//!     name_len u32, name (UTF-8, name_len bytes)
//!     ndim     u32, dims (ndim × u64)
//!     values   f64 × product(dims), row-major
//! }
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CTQWCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint(mut w: impl Write, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamStore> {
    let magic = read_array::<8>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated parameter name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        if store.id_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(&shape, data));
    }
    Ok(store)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut f, store)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}
