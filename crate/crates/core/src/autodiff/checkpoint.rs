//! Versioned binary container of named `f32` buffers.
//!
//! Layout: the 8-byte magic `SECOCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then the raw
//! little-endian `f32` payload. The header lists every entry's name,
//! shape and element offset into the payload, plus free-form metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SECOCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    entries: Vec<EntryHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Every parameter under its name and every buffer under `buffer:<name>`.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut entries: Vec<Entry> = store
            .ids()
            .map(|id| Entry {
                name: store.name(id).to_string(),
                shape: store.tensor(id).shape().to_vec(),
                data: store.tensor(id).data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        entries.extend(store.buffer_ids().map(|id| Entry {
            name: format!("buffer:{}", store.buffer_name(id)),
            shape: vec![store.buffer(id).len()],
            data: store.buffer(id).iter().map(|&v| v as f32).collect(),
        }));
        Checkpoint {
            entries,
            meta: serde_json::Value::Null,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Loads every parameter and buffer of `store` by name. Missing
    /// entries or shape disagreements are errors; nothing is written then.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        let mut plan = Vec::new();
        for id in store.ids() {
            let name = store.name(id);
            let e = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if e.shape != store.tensor(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    e.shape,
                    store.tensor(id).shape()
                )));
            }
            plan.push(e);
        }
        let mut buf_plan = Vec::new();
        for id in store.buffer_ids() {
            let key = format!("buffer:{}", store.buffer_name(id));
            let e = self
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
            if e.data.len() != store.buffer(id).len() {
                return Err(Error::Checkpoint(format!("{key}: length mismatch")));
            }
            buf_plan.push(e);
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, e) in ids.into_iter().zip(plan) {
            let dst = store.tensor_mut(id).data_mut();
            dst.iter_mut().zip(&e.data).for_each(|(d, &s)| *d = s as f64);
        }
        let bids: Vec<_> = store.buffer_ids().collect();
        for (id, e) in bids.into_iter().zip(buf_plan) {
            let dst = store.buffer_mut(id);
            dst.iter_mut().zip(&e.data).for_each(|(d, &s)| *d = s as f64);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut headers = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Checkpoint(format!("entry {} has inconsistent shape", e.name)));
            }
            headers.push(EntryHeader {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
            });
            offset += e.data.len();
        }
        let header = serde_json::to_vec(&Header {
            version: VERSION,
            dtype: "f32".into(),
            entries: headers,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &bytes[body..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for h in header.entries {
            let n: usize = h.shape.iter().product();
            let (start, end) = (h.offset * 4, (h.offset + n) * 4);
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("entry {} runs past payload", h.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry {
                name: h.name,
                shape: h.shape,
                data,
            });
        }
        Ok(Checkpoint {
            entries,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
