//! Parameter checkpoints.
//!
//! Versioned binary, little-endian:
//! magic "LNKP" | u32 version | records until EOF, each
//! u32 name_len | name bytes (utf-8) | u32 rank | u32 extents[rank] |
//! f64 payload[product(extents)]
//!
//! Payloads are raw f64 bits, so save/load round-trips exactly.

use std::fs;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::Tensor;

use super::{ModelError, ModelParameters};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LNKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported checkpoint version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("truncated checkpoint {path}")]
    Truncated { path: String },
    #[error("malformed checkpoint {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("checkpoint {path} does not describe a valid parameter set: {source}")]
    Model {
        path: String,
        #[source]
        source: ModelError,
    },
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for param in params.set.iter() {
        let name = param.name.as_bytes();
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        let shape = param.value.shape();
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &extent in shape {
            bytes.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &x in param.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let path_str = path.display().to_string();
    let mut cursor = bytes.as_slice();
    let truncated = || CheckpointError::Truncated {
        path: path_str.clone(),
    };

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| truncated())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path_str,
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut cursor).ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: path_str,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }

    let mut records = Vec::new();
    while !cursor.is_empty() {
        let name_len = read_u32(&mut cursor).ok_or_else(truncated)? as usize;
        if cursor.len() < name_len {
            return Err(truncated());
        }
        let (name_bytes, rest) = cursor.split_at(name_len);
        cursor = rest;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed {
                path: path_str.clone(),
                message: "parameter name is not valid utf-8".into(),
            })?
            .to_string();
        let rank = read_u32(&mut cursor).ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cursor).ok_or_else(truncated)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 8];
            cursor.read_exact(&mut buf).map_err(|_| truncated())?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed {
            path: path_str.clone(),
            message: format!("record {name}: {e}"),
        })?;
        records.push((name, tensor));
    }

    ModelParameters::from_named(records).map_err(|e| CheckpointError::Model {
        path: path_str,
        source: e,
    })
}

fn read_u32(cursor: &mut &[u8]) -> Option<u32> {
    let mut buf = [0u8; 4];
    cursor.read_exact(&mut buf).ok()?;
    Some(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;

    #[test]
    fn round_trip_is_exact() {
        let params = ModelParameters::init(ModelDims::new(4, 8, 3, 8, 2), 19);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lnkp");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, params.dims);
        for (a, b) in params.set.iter().zip(loaded.set.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "{} must round-trip exactly", a.name);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let params = ModelParameters::init(ModelDims::new(4, 8, 3, 8, 2), 19);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.lnkp"), dir.path().join("b.lnkp"));
        save_checkpoint(&params, &p1).unwrap();
        save_checkpoint(&params, &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_typed() {
        let params = ModelParameters::init(ModelDims::new(4, 8, 3, 8, 2), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lnkp");
        save_checkpoint(&params, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut corrupt = good.clone();
        corrupt[0] = b'Z';
        fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));

        fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
