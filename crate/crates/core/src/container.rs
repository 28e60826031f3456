//! Versioned binary container for model checkpoints.
//!
//! Layout: a 4-byte magic, a format version, a JSON header describing the
//! checkpoint kind, arbitrary metadata, and the named parameter blocks, then
//! the blocks themselves as little-endian f64 runs. The loader rejects any
//! file whose version it does not support.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    blocks: Vec<BlockInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: u64,
}

/// A checkpoint loaded into memory.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    blocks: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    /// The named block, or a container error listing what is available.
    pub fn block(&self, name: &str) -> Result<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, data)| data.as_slice())
            .ok_or_else(|| {
                let available: Vec<&str> = self.blocks.iter().map(|(n, _)| n.as_str()).collect();
                Error::State(format!(
                    "checkpoint has no block '{}'; available: {}",
                    name,
                    available.join(", ")
                ))
            })
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Errors unless the checkpoint was saved with the expected kind.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::State(format!(
                "checkpoint kind is '{}', expected '{}'",
                self.kind, kind
            )));
        }
        Ok(())
    }
}

/// Writes a checkpoint file from named f64 blocks.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    meta: Value,
    blocks: &[(&str, &[f64])],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        blocks: blocks
            .iter()
            .map(|(name, data)| BlockInfo {
                name: name.to_string(),
                len: data.len() as u64,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Container {
        path: path.to_path_buf(),
        msg: format!("header serialization failed: {}", e),
    })?;

    let mut out = Vec::new();
    out.write_all(MAGIC).expect("vec write");
    out.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(header_json.len() as u64)
        .expect("vec write");
    out.write_all(&header_json).expect("vec write");
    for (_, data) in blocks {
        for &v in *data {
            out.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];

    let mut magic = [0u8; 4];
    cursor.read_exact(&mut magic).map_err(|_| truncated(path))?;
    if &magic != MAGIC {
        return Err(Error::Container {
            path: path.to_path_buf(),
            msg: "bad magic, not a checkpoint file".into(),
        });
    }
    let version = cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(path))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = cursor
        .read_u64::<LittleEndian>()
        .map_err(|_| truncated(path))? as usize;
    if cursor.len() < header_len {
        return Err(truncated(path));
    }
    let header: Header = serde_json::from_slice(&cursor[..header_len]).map_err(|e| {
        Error::Container {
            path: path.to_path_buf(),
            msg: format!("header parse failed: {}", e),
        }
    })?;
    cursor = &cursor[header_len..];

    let mut blocks = Vec::with_capacity(header.blocks.len());
    for info in &header.blocks {
        let mut data = vec![0.0; info.len as usize];
        for v in &mut data {
            *v = cursor
                .read_f64::<LittleEndian>()
                .map_err(|_| truncated(path))?;
        }
        blocks.push((info.name.clone(), data));
    }
    if !cursor.is_empty() {
        return Err(Error::Container {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes after last block", cursor.len()),
        });
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        blocks,
    })
}

fn truncated(path: &Path) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        msg: "file truncated".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn roundtrips_blocks_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = vec![1.0, -2.5, 3.25];
        let b = vec![0.0; 7];
        save_checkpoint(
            &path,
            "scorer",
            json!({"class": 3, "loss": 0.125}),
            &[("enc.weight", &a), ("enc.bias", &b)],
        )
        .unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "scorer");
        assert_eq!(ck.meta["class"], 3);
        assert_eq!(ck.block("enc.weight").unwrap(), a.as_slice());
        assert_eq!(ck.block("enc.bias").unwrap(), b.as_slice());
        assert!(ck.block("missing").is_err());
        assert!(ck.expect_kind("scorer").is_ok());
        assert!(ck.expect_kind("denoiser").is_err());
    }

    #[test]
    fn rejects_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, "scorer", json!({}), &[]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::VersionMismatch { found, supported, .. } => {
                assert_eq!(found, 99);
                assert_eq!(supported, FORMAT_VERSION);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Container { .. }
        ));

        let good = dir.path().join("good.ckpt");
        let data = vec![1.0; 16];
        save_checkpoint(&good, "scorer", json!({}), &[("w", &data)]).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&good, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&good).unwrap_err(),
            Error::Container { .. }
        ));
    }

    #[test]
    fn preserves_exact_bit_patterns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let values = vec![
            f64::MIN_POSITIVE,
            -0.0,
            1.0 / 3.0,
            f64::MAX,
            2.2250738585072014e-308,
        ];
        save_checkpoint(&path, "bits", json!(null), &[("v", &values)]).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        for (a, b) in values.iter().zip(ck.block("v").unwrap()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
