//! Named parameter store and its on-disk container.
//!
//! The container is a single file: an 8-byte magic, a little-endian u32
//! length, a JSON manifest of that length, then a flat payload of f32
//! little-endian values. The manifest is an ordered array of entries, each
//! carrying the parameter name, shape, dtype, and byte offset into the
//! payload, so the file round-trips byte for byte.
//!
//! Parameters live in memory as f64; writing truncates to f32. Stores built
//! by the initializer quantize at creation so a fresh model survives a
//! save/load cycle without any drift.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, DenseTensor};

pub const MAGIC: &[u8; 8] = b"SPKW0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    elems: u64,
}

/// Ordered name -> tensor map. Insertion order is the serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, DenseTensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: DenseTensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Weights(format!("duplicate parameter name: {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.index.get(name).map(|i| &self.entries[*i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Fetch a tensor, checking its shape; used while assembling models.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<DenseTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter: {name}")))?;
        if t.shape != shape {
            return Err(Error::Weights(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(t.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in &self.entries {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".to_string(),
                offset: payload.len() as u64,
                elems: t.data.len() as u64,
            });
            for v in &t.data {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let manifest_json =
            serde_json::to_vec(&manifest).map_err(|e| Error::Weights(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + manifest_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Weights("not a weight container (bad magic)".into()));
        }
        let mlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        if bytes.len() < 12 + mlen {
            return Err(Error::Weights("weight container manifest is truncated".into()));
        }
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[12..12 + mlen])
            .map_err(|e| Error::Weights(format!("bad manifest: {e}")))?;
        let payload = &bytes[12 + mlen..];
        let mut store = ParamStore::new();
        for e in manifest {
            if e.dtype != "f32" {
                return Err(Error::Weights(format!("unsupported dtype {} for {}", e.dtype, e.name)));
            }
            if numel(&e.shape) as u64 != e.elems {
                return Err(Error::Weights(format!("shape/element mismatch for {}", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 4 * e.elems as usize;
            if end > payload.len() {
                return Err(Error::Weights(format!("payload is truncated at {}", e.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&e.name, DenseTensor::new(e.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Round every value to its f32 representation.
    pub fn quantize_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}
