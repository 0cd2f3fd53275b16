//! Flat binary archive of named tensors.
//!
//! Record layout, all integers little-endian:
//! `u32 name_len | name bytes (UTF-8) | u32 rank | u32 shape[rank] |
//! f32 data (row-major)`. Records are concatenated until end of file and
//! written in sorted name order, so two archives with equal contents are
//! byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    records: BTreeMap<String, TensorRecord>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix) {
        let record = TensorRecord {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().map(|&v| v as f32).collect(),
        };
        self.records.insert(name.to_string(), record);
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let rec = self
            .records
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if rec.shape.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "{name}: expected rank 2, found {}",
                rec.shape.len()
            )));
        }
        let (r, c) = (rec.shape[0], rec.shape[1]);
        let data: Vec<f64> = rec.data.iter().map(|&v| v as f64).collect();
        Matrix::from_shape_vec((r, c), data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    /// Records whose name starts with `prefix`, as a new archive.
    pub fn subset(&self, prefix: &str) -> TensorArchive {
        TensorArchive {
            records: self
                .records
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &TensorArchive) {
        for (k, v) in &other.records {
            self.records.insert(k.clone(), v.clone());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &dim in &rec.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut records = BTreeMap::new();
        let mut cur = bytes;
        let read_u32 = |cur: &mut &[u8]| -> Result<u32> {
            if cur.len() < 4 {
                return Err(Error::Checkpoint("truncated archive".into()));
            }
            let mut buf = [0u8; 4];
            buf.copy_from_slice(&cur[..4]);
            *cur = &cur[4..];
            Ok(u32::from_le_bytes(buf))
        };
        while !cur.is_empty() {
            let name_len = read_u32(&mut cur)? as usize;
            if cur.len() < name_len {
                return Err(Error::Checkpoint("truncated tensor name".into()));
            }
            let name = std::str::from_utf8(&cur[..name_len])
                .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?
                .to_string();
            cur = &cur[name_len..];
            let rank = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut cur)? as usize);
            }
            let count: usize = shape.iter().product();
            if cur.len() < count * 4 {
                return Err(Error::Checkpoint(format!("{name}: truncated data")));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in cur[..count * 4].chunks_exact(4) {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(chunk);
                data.push(f32::from_le_bytes(buf));
            }
            cur = &cur[count * 4..];
            records.insert(name, TensorRecord { shape, data });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
