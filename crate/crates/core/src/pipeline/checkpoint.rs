//! Binary checkpoint format.
//!
//! ```text
//! b"DHMDCKPT"                     magic
//! u32 version
//! u32 n, n bytes                  JSON metadata (config, data shape, progress)
//! u32 count                       number of tensor entries
//! per entry:
//!   u32 n, n bytes                UTF-8 name
//!   u32 rank, rank x u32          dims
//!   prod(dims) x f32              values
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments are stored as
//! entries named `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::datamodel::write_bytes_atomic;
use crate::nn::ParamStore;
use crate::pipeline::optim::Adam;
use crate::{DhmdError, Result};

pub const MAGIC: &[u8; 8] = b"DHMDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: BTreeMap<String, Entry>,
}

fn entry_of(t: &Tensor) -> Result<Entry> {
    Ok(Entry {
        dims: t.dims().to_vec(),
        values: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.entries.insert(name.to_owned(), entry_of(t)?);
        Ok(())
    }

    /// Parameters and, when given, optimizer moments.
    pub fn capture(meta: serde_json::Value, store: &ParamStore, adam: Option<&Adam>) -> Result<Self> {
        let mut ck = Checkpoint::new(meta);
        for (name, var) in store.iter() {
            ck.insert(name, var.as_tensor())?;
        }
        if let Some(adam) = adam {
            for (name, (m, v)) in &adam.moments {
                ck.insert(&format!("adam.m.{name}"), m)?;
                ck.insert(&format!("adam.v.{name}"), v)?;
            }
        }
        Ok(ck)
    }

    pub fn tensor(&self, name: &str, device: &Device, dtype: DType) -> Result<Option<Tensor>> {
        match self.entries.get(name) {
            Some(e) => Ok(Some(
                Tensor::from_slice(&e.values, e.dims.as_slice(), device)?.to_dtype(dtype)?,
            )),
            None => Ok(None),
        }
    }

    /// Copies stored values into every parameter of `store`; all must be present with matching shapes.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        for (name, var) in store.iter() {
            let e = self.entries.get(name).ok_or_else(|| DhmdError::Checkpoint {
                path: Default::default(),
                reason: format!("missing parameter {name}"),
            })?;
            if e.dims.as_slice() != var.dims() {
                return Err(DhmdError::Checkpoint {
                    path: Default::default(),
                    reason: format!("parameter {name} has dims {:?}, model expects {:?}", e.dims, var.dims()),
                });
            }
            let t = self
                .tensor(name, store.device(), store.dtype())?
                .expect("entry checked above");
            store.set(name, &t)?;
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore, adam: &mut Adam, step: u64) -> Result<()> {
        adam.moments.clear();
        adam.step = step;
        for (name, _) in store.iter() {
            let m = self.tensor(&format!("adam.m.{name}"), store.device(), store.dtype())?;
            let v = self.tensor(&format!("adam.v.{name}"), store.device(), store.dtype())?;
            if let (Some(m), Some(v)) = (m, v) {
                adam.moments.insert(name.clone(), (m, v));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| DhmdError::Checkpoint {
            path: Default::default(),
            reason: e.to_string(),
        })?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let n = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(n)?).map_err(|e| format!("metadata: {e}"))?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or("tensor too large")?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.insert(name, Entry { dims, values });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DhmdError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| DhmdError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}
