//! Single-file checkpoint: 8-byte magic + version header, a JSON index
//! (key → offset, shape, dtype) and raw little-endian f64 blocks. The index
//! stays human-debuggable; the payload is bit-exact.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FceError, Result};

pub const MAGIC: [u8; 8] = *b"FCELABCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    key: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    arrays: Vec<IndexEntry>,
}

/// In-memory checkpoint contents: free-form JSON metadata plus named f64
/// arrays with shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, key: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push((key.into(), shape, data));
    }

    pub fn array(&self, key: &str) -> Result<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| FceError::Checkpoint(format!("missing key `{key}`")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| FceError::Checkpoint(format!("missing or non-integer meta `{key}`")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| FceError::Checkpoint(format!("missing or non-string meta `{key}`")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (key, shape, data) in &self.arrays {
            let n: usize = shape.iter().product();
            if n != data.len() {
                return Err(FceError::Checkpoint(format!(
                    "array `{key}`: shape {shape:?} does not hold {} values",
                    data.len()
                )));
            }
            entries.push(IndexEntry {
                key: key.clone(),
                shape: shape.clone(),
                dtype: "f64".into(),
                offset,
            });
            offset += (data.len() * 8) as u64;
        }
        let index =
            serde_json::to_vec(&Index { meta: self.meta.clone(), arrays: entries })?;

        let mut f = File::create(path)?;
        f.write_all(&MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(index.len() as u64).to_le_bytes())?;
        f.write_all(&index)?;
        for (_, _, data) in &self.arrays {
            let mut buf = Vec::with_capacity(data.len() * 8);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 {
            return Err(FceError::Checkpoint("truncated header".into()));
        }
        if bytes[..8] != MAGIC {
            return Err(FceError::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(FceError::Checkpoint(format!(
                "version mismatch: file has {version}, expected {VERSION}"
            )));
        }
        let index_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20 + index_len;
        if bytes.len() < payload_start {
            return Err(FceError::Checkpoint("truncated index".into()));
        }
        let index: Index = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| FceError::Checkpoint(format!("corrupt index: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut arrays = Vec::with_capacity(index.arrays.len());
        let mut end_max = 0usize;
        for e in index.arrays {
            if e.dtype != "f64" {
                return Err(FceError::Checkpoint(format!(
                    "array `{}` has unsupported dtype `{}`",
                    e.key, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(FceError::Checkpoint(format!("truncated payload at `{}`", e.key)));
            }
            end_max = end_max.max(end);
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((e.key, e.shape, data));
        }
        if end_max != payload.len() {
            return Err(FceError::Checkpoint(format!(
                "{} trailing payload bytes",
                payload.len() - end_max
            )));
        }
        Ok(Checkpoint { meta: index.meta, arrays })
    }

    /// Copies arrays under `prefix` into parameter tensors by exact name, in
    /// the order given. Every prefixed key must be consumed; unknown keys
    /// under the prefix are an error.
    pub fn restore_params(
        &self,
        named: &[(String, Vec<usize>)],
        params: &mut [&mut crate::tensor::Tensor],
    ) -> Result<()> {
        assert_eq!(named.len(), params.len());
        for ((name, shape), slot) in named.iter().zip(params.iter_mut()) {
            let (s, d) = self.array(name)?;
            if s != shape.as_slice() {
                return Err(FceError::Checkpoint(format!(
                    "array `{name}`: shape {s:?} in file, {shape:?} expected"
                )));
            }
            slot.data_mut().copy_from_slice(d);
        }
        Ok(())
    }

    /// Errors when the file holds any array key outside `expected`.
    pub fn reject_unknown_keys(&self, expected: &[String]) -> Result<()> {
        for (k, _, _) in &self.arrays {
            if !expected.iter().any(|e| e == k) {
                return Err(FceError::Checkpoint(format!("unknown array key `{k}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_ck() -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"method": "fce", "iter": 42}));
        ck.push("a.W", vec![2, 3], vec![1.5, -2.25, 0.1, 4.0, 1e-300, -0.0]);
        ck.push("a.b", vec![3], vec![0.25, f64::MIN_POSITIVE, 7.0]);
        ck
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample_ck();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        // bit-exactness, not just value equality
        for ((_, _, d1), (_, _, d2)) in ck.arrays.iter().zip(&back.arrays) {
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn flipped_magic_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample_ck().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        let e = Checkpoint::load(&path).unwrap_err();
        assert!(e.to_string().contains("magic"), "{e}");
    }

    #[test]
    fn wrong_version_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample_ck().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        let e = Checkpoint::load(&path).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");
    }

    #[test]
    fn truncated_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample_ck().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let e = Checkpoint::load(&path).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let ck = sample_ck();
        let e = ck.reject_unknown_keys(&["a.W".to_string()]).unwrap_err();
        assert!(e.to_string().contains("a.b"), "{e}");
    }

    #[test]
    fn missing_key_is_error() {
        let ck = sample_ck();
        assert!(ck.array("nope").is_err());
    }
}
