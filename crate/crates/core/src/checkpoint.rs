//! Single-file tensor container.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping each
//! tensor name to `{dtype, shape, offset, nbytes}`, then the little-endian payload.
//! An optional `__metadata__` header entry carries free-form JSON.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TflowError};

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: serde_json::Value,
}

fn header_error(reason: impl Into<String>) -> TflowError {
    TflowError::Format { tensor: "<header>".into(), reason: reason.into() }
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { tensors: BTreeMap::new(), metadata }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(TflowError::Config(format!("{METADATA_KEY} is reserved")));
        }
        self.tensors.insert(name, t.detach());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| TflowError::Format { tensor: name.into(), reason: "missing".into() })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let entry = Entry {
                dtype: "f32".into(),
                shape: t.dims().to_vec(),
                offset: payload.len() as u64,
                nbytes: (data.len() * 4) as u64,
            };
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            header.insert(name.clone(), serde_json::to_value(entry)?);
        }
        if !self.metadata.is_null() {
            header.insert(METADATA_KEY.into(), self.metadata.clone());
        }
        let header = serde_json::to_vec(&serde_json::Value::Object(header))?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(header_error("file shorter than the length prefix"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| header_error("header length exceeds file size"))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..end]).map_err(|e| header_error(e.to_string()))?;
        let payload = &bytes[end..];
        let mut metadata = serde_json::Value::Null;
        let mut entries = Vec::new();
        for (name, v) in header {
            if name == METADATA_KEY {
                metadata = v;
                continue;
            }
            let entry: Entry = serde_json::from_value(v)
                .map_err(|e| TflowError::Format { tensor: name.clone(), reason: e.to_string() })?;
            entries.push((name, entry));
        }
        entries.sort_by(|a, b| a.1.offset.cmp(&b.1.offset).then_with(|| a.0.cmp(&b.0)));
        let mut tensors = BTreeMap::new();
        for (name, e) in entries {
            let fail = |reason: String| TflowError::Format { tensor: name.clone(), reason };
            if e.dtype != "f32" {
                return Err(fail(format!("unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != (numel * 4) as u64 {
                return Err(fail(format!("nbytes {} does not match shape {:?}", e.nbytes, e.shape)));
            }
            let start = e.offset as usize;
            let stop = start
                .checked_add(e.nbytes as usize)
                .filter(|&s| s <= payload.len())
                .ok_or_else(|| fail(format!("payload truncated: needs bytes {}..{}, have {}", e.offset, e.offset + e.nbytes, payload.len())))?;
            let data: Vec<f32> =
                payload[start..stop].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, Tensor::from_vec(data, e.shape.as_slice(), &Device::Cpu)?);
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"step": 3}));
        c.insert("b.x", &Tensor::new(&[1.5f32, -2.0, 3.25], &Device::Cpu).unwrap()).unwrap();
        c.insert("a.y", &Tensor::new(&[[0.0f32, 1.0], [2.0, 3.0]], &Device::Cpu).unwrap()).unwrap();
        c
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata["step"], 3);
        assert_eq!(back.get("a.y").unwrap().dims(), &[2, 2]);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_names_first_unreadable_tensor() {
        let bytes = sample().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match Container::from_bytes(cut) {
            Err(TflowError::Format { tensor, .. }) => assert_eq!(tensor, "b.x"),
            other => panic!("unexpected {other:?}"),
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        match Container::from_bytes(&bytes[..8 + hlen + 2]) {
            Err(TflowError::Format { tensor, .. }) => assert_eq!(tensor, "a.y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[9] = b'#';
        assert!(matches!(Container::from_bytes(&bytes), Err(TflowError::Format { .. })));
        assert!(matches!(Container::from_bytes(&[1, 2]), Err(TflowError::Format { .. })));
    }

    #[test]
    fn reserved_name_rejected() {
        let mut c = Container::default();
        assert!(c.insert(METADATA_KEY, &Tensor::new(&[1f32], &Device::Cpu).unwrap()).is_err());
    }
}
