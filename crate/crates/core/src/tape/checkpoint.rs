//! Versioned binary checkpoint format for named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  b"IVRT"
//! version u16      currently 1
//! meta    u32 len + UTF-8 bytes    caller-supplied provenance text
//! count   u32                      number of arrays
//! entry   repeated `count` times:
//!   name  u16 len + UTF-8 bytes
//!   ndim  u8
//!   dims  ndim x u64
//!   data  product(dims) x f64      row-major payload
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Array;

const MAGIC: &[u8; 4] = b"IVRT";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {found} (expected {expected})")]
    BadVersion {
        path: String,
        found: u16,
        expected: u16,
    },
    #[error("{path}: corrupt checkpoint: {what}")]
    Corrupt { path: String, what: String },
}

pub fn write_checkpoint(
    path: &Path,
    meta: &str,
    entries: &[(String, &Array)],
) -> Result<(), CheckpointError> {
    let wrap = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    let mut run = || -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, array) in entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(array.rank() as u8).to_le_bytes())?;
            for d in array.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in array.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    run().map_err(wrap)
}

pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Array)>), CheckpointError> {
    let pstr = path.display().to_string();
    let wrap = |source| CheckpointError::Io {
        path: pstr.clone(),
        source,
    };
    let corrupt = |what: &str| CheckpointError::Corrupt {
        path: pstr.clone(),
        what: what.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(wrap)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(wrap)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { path: pstr });
    }
    let version = read_u16(&mut r).map_err(wrap)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: pstr,
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = read_u32(&mut r).map_err(wrap)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(wrap)?;
    let meta = String::from_utf8(meta).map_err(|_| corrupt("meta is not UTF-8"))?;

    let count = read_u32(&mut r).map_err(wrap)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r).map_err(wrap)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(wrap)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("name is not UTF-8"))?;
        let ndim = read_u8(&mut r).map_err(wrap)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r).map_err(wrap)? as usize);
        }
        let len: usize = if shape.is_empty() {
            1
        } else {
            shape.iter().product()
        };
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(wrap)?;
            data.push(f64::from_le_bytes(buf));
        }
        let array =
            Array::from_vec(&shape, data).map_err(|e| corrupt(&format!("bad array: {e}")))?;
        entries.push((name, array));
    }
    Ok((meta, entries))
}

fn read_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = Array::from_vec(&[2, 3], vec![1.0, -2.5, 3e-17, f64::MIN_POSITIVE, 0.0, 9.9])
            .unwrap();
        let b = Array::scalar(0.123456789);
        write_checkpoint(
            &path,
            "config = \"snapshot\"",
            &[("gen.w".to_string(), &a), ("head.b".to_string(), &b)],
        )
        .unwrap();
        let (meta, entries) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, "config = \"snapshot\"");
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "gen.w");
        assert_eq!(entries[0].1, a);
        assert_eq!(entries[1].0, "head.b");
        assert_eq!(entries[1].1, b);
    }

    #[test]
    fn rejects_garbage_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
    }
}
