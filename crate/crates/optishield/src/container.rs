//! Self-describing container of named f32 tensors plus JSON metadata.
//!
//! One format is shared by model checkpoints and cached corpora. Layout:
//!
//! ```text
//! magic "OPSH" | u32 version | u64 header_len | header JSON | payload (f32 LE)
//! ```
//!
//! The header lists every tensor (name, shape, offset into the payload) and a
//! SHA-256 of the payload, so truncation or bit-rot is detected on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OPSH";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    payload_sha256: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
    len: usize,
}

/// In-memory container: named tensors plus free-form JSON metadata.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: BTreeMap::new() }
    }

    pub fn insert<D: ndarray::Dimension>(&mut self, name: &str, tensor: ndarray::Array<f32, D>) {
        self.tensors.insert(name.to_string(), tensor.into_dyn());
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("container has no tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            let len = tensor.len();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
                len,
            });
            // Standard layout guaranteed for owned arrays built via into_dyn.
            for &v in tensor.iter() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += len;
        }
        let header = Header {
            version: VERSION,
            payload_sha256: format!("{:x}", Sha256::digest(&payload)),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a tensor container (bad magic)",
                path.display()
            )));
        }
        let mut version = [0u8; 4];
        file.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != VERSION {
            return Err(Error::Format(format!(
                "container version {version} unsupported (expected {VERSION})"
            )));
        }
        let mut header_len = [0u8; 8];
        file.read_exact(&mut header_len)?;
        let header_len = u64::from_le_bytes(header_len) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let digest = format!("{:x}", Sha256::digest(&payload));
        if digest != header.payload_sha256 {
            return Err(Error::Integrity(format!(
                "payload checksum mismatch in {} (expected {}, got {})",
                path.display(),
                header.payload_sha256,
                digest
            )));
        }

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let start = entry.offset * 4;
            let end = start + entry.len * 4;
            if end > payload.len() {
                return Err(Error::Integrity(format!(
                    "tensor {:?} extends past the payload",
                    entry.name
                )));
            }
            let values: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let expected: usize = entry.shape.iter().product();
            if expected != entry.len {
                return Err(Error::Integrity(format!(
                    "tensor {:?} shape {:?} does not match length {}",
                    entry.name, entry.shape, entry.len
                )));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Integrity(format!("tensor {:?}: {e}", entry.name)))?;
            tensors.insert(entry.name, arr);
        }
        Ok(Self { meta: header.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tns");
        let mut c = Container::new(serde_json::json!({"seed": 7}));
        c.insert("a", Array2::from_shape_fn((3, 4), |(r, q)| (r * 4 + q) as f32 * 0.5));
        c.insert("b", Array1::from_vec(vec![1.0f32, -2.5, 3.25]));
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        assert_eq!(back.meta["seed"], 7);
        assert_eq!(back.get("a").unwrap().shape(), &[3, 4]);
        assert_eq!(back.get("b").unwrap().as_slice().unwrap(), &[1.0, -2.5, 3.25]);
    }

    #[test]
    fn corrupted_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tns");
        let mut c = Container::new(serde_json::Value::Null);
        c.insert("w", Array1::from_vec(vec![0.25f32; 16]));
        c.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Container::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_tensor_reported() {
        let c = Container::new(serde_json::Value::Null);
        assert!(matches!(c.get("nope"), Err(Error::Format(_))));
    }
}
