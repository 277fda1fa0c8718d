//! MSMT binary tensor files.
//!
//! Layout: `b"MSMT"`, version `0x01`, dtype `0x01` (float32 LE), rank byte,
//! `rank` little-endian u32 extents, then the row-major payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSMT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x01;

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Invalid(format!("rank {} too large for MSMT", t.rank())));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let v = v.to_f32().ok_or(Error::NonFinite { op: "msmt encode" })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses MSMT bytes; `origin` names the source in error messages.
pub fn decode<T: Real>(bytes: &[u8], origin: &Path) -> Result<Tensor<T>> {
    let fail = |msg: &str| Error::Format {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(fail("not an MSMT file (bad magic)"));
    }
    if bytes[4] != VERSION {
        return Err(fail(&format!("unsupported MSMT version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(fail(&format!("unsupported dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(fail(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(&e.to_string()))
}

pub fn save<T: Real>(t: &Tensor<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn load<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
