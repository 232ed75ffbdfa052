//! Checkpoint files: named parameter tensors serialized as 32-bit floats.
//!
//! Layout (all integers little-endian):
//! `"LWCP"` magic, `u16` version, `u32` entry count, then per entry a
//! `u16`-length UTF-8 name, a `u32` element count, and the raw `f32` values.
//! Loading requires the file's name set to match the model's exactly; a
//! checkpoint trained for one configuration never silently half-loads into
//! another.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::ParamList;
use crate::tensor::Real;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LWCP";
const VERSION: u16 = 1;

pub fn save<R: Real>(path: &Path, params: &ParamList<R>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "parameter name too long");
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        let data = t.copy_data();
        buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the file's values into the given parameter tensors. The name sets
/// must match exactly in both directions and every element count must agree.
pub fn load_into<R: Real>(path: &Path, params: &ParamList<R>) -> Result<()> {
    let mut stored = read_entries(path)?;
    for (name, t) in params {
        let values = stored.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing parameter \"{name}\"", path.display()))
        })?;
        let want = t.shape().numel();
        if values.len() != want {
            return Err(Error::Checkpoint(format!(
                "{}: \"{name}\" holds {} values, model expects {want}",
                path.display(),
                values.len()
            )));
        }
        t.set_data(values.iter().map(|&v| R::from_f64(v as f64)).collect());
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter \"{extra}\" (and {} more) not present in the model",
            path.display(),
            stored.len() - 1
        )));
    }
    Ok(())
}

fn read_entries(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut out = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let numel = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let raw = take(numel * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name, values).is_some() {
            return Err(bad("duplicate parameter name"));
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last parameter"));
    }
    Ok(out)
}

/// First 8 bytes of the file's SHA-256, recorded in bitstream headers so a
/// decoder can refuse to run with the wrong weights.
pub fn file_hash(path: &Path) -> Result<[u8; 8]> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut f, &mut hasher).map_err(|e| Error::io(path, e))?;
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    Ok(out)
}
