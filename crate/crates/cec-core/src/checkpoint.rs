//! Versioned binary checkpoint container: magic bytes "CEC1" followed by
//! length-prefixed named tensors in little-endian 64-bit floats. Everything
//! a training run needs to continue bit-identically lives here: parameters,
//! optimizer moments, the step counter, and the exact generator state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CecError, Result};

pub const MAGIC: &[u8; 4] = b"CEC1";

/// One named tensor: dimensions plus row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn vector(data: Vec<f64>) -> Self {
        Entry { dims: vec![data.len()], data }
    }

    pub fn scalar(v: f64) -> Self {
        Entry { dims: vec![1], data: vec![v] }
    }
}

/// In-memory checkpoint: a sorted name -> tensor map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub entries: BTreeMap<String, Entry>,
}

impl Snapshot {
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| CecError::Format(format!("checkpoint missing entry '{name}'")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(entry.dims.len() as u32).to_le_bytes())?;
            for &d in &entry.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let expect: usize = entry.dims.iter().product();
            if expect != entry.data.len() {
                return Err(CecError::Format(format!(
                    "entry '{name}' has {} values for dims {:?}",
                    entry.data.len(),
                    entry.dims
                )));
            }
            for &v in &entry.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CecError::Format(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let name_len = u32::from_le_bytes(u32buf) as usize;
            if name_len > 4096 {
                return Err(CecError::Format(format!("entry name length {name_len} implausible")));
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CecError::Format("entry name is not utf-8".into()))?;
            r.read_exact(&mut u32buf)?;
            let ndim = u32::from_le_bytes(u32buf) as usize;
            if ndim > 8 {
                return Err(CecError::Format(format!("entry '{name}' has {ndim} dims")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut u32buf)?;
                dims.push(u32::from_le_bytes(u32buf) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut f64buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut f64buf)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            entries.insert(name, Entry { dims, data });
        }
        Ok(Snapshot { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}
