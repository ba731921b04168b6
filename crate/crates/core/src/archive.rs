//! Flat tensor archive used for checkpoints and external frozen weights.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "SFTA"
//! version  u32      1
//! dtype    u8       0 = f32, 1 = f64
//! meta     u32 length + UTF-8 bytes (free-form, JSON by convention)
//! count    u32
//! entries  count × { u32 name length, name bytes, u32 ndim, ndim × u32 dims, data }
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFTA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub dtype: DType,
    pub meta: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(dtype: DType, meta: impl Into<String>) -> Self {
        Self {
            dtype,
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        b.extend_from_slice(MAGIC);
        u32le(&mut b, VERSION as usize);
        b.push(match self.dtype {
            DType::F32 => 0,
            DType::F64 => 1,
        });
        u32le(&mut b, self.meta.len());
        b.extend_from_slice(self.meta.as_bytes());
        u32le(&mut b, self.entries.len());
        for (name, t) in &self.entries {
            u32le(&mut b, name.len());
            b.extend_from_slice(name.as_bytes());
            u32le(&mut b, t.ndim());
            for &d in t.shape() {
                u32le(&mut b, d);
            }
            for &v in t.iter() {
                match self.dtype {
                    DType::F32 => b.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => b.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "not a tensor archive (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format(origin, format!("unsupported archive version {version}")));
        }
        let dtype = match r.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(Error::format(origin, format!("unknown dtype tag {d}"))),
        };
        let meta = r.string()?;
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = match dtype {
                DType::F32 => r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => r
                    .take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t = ArrayD::from_shape_vec(IxDyn(&dims), vals).expect("size matches dims");
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last entry"));
        }
        Ok(Self { dtype, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.origin, "archive truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "name is not UTF-8"))
    }
}
