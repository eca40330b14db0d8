//! HOFF on-disk tensors.
//!
//! A single tensor record is laid out as (all integers little-endian):
//!
//! ```text
//! b"HOFF" | version: u32 = 1 | dtype: u8 | ndim: u32 | dims: u32 × ndim | payload
//! ```
//!
//! `dtype` is 0 for `u8` and 1 for little-endian `f32`; the payload is the
//! row-major element array.
//!
//! Named collections of tensors (checkpoints, label bundles) use an archive
//! wrapping standard records:
//!
//! ```text
//! b"HOFA" | version: u32 = 1 | count: u32 |
//!   count × ( name_len: u32 | name: utf-8 | record_len: u64 | HOFF record )
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HOFF";
const ARCHIVE_MAGIC: &[u8; 4] = b"HOFA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        let len = match &data {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
        };
        if n != len {
            return Err(Error::shape("tensor payload", n, len));
        }
        Ok(Tensor { dims, data })
    }

    /// Panics if `data.len()` disagrees with `dims`.
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(dims, TensorData::F32(data)).expect("tensor dims match payload")
    }

    /// Panics if `data.len()` disagrees with `dims`.
    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Self {
        Self::new(dims, TensorData::U8(data)).expect("tensor dims match payload")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::format("tensor", "expected f32 payload, found u8")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::format("tensor", "expected u8 payload, found f32")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (code, elem) = match &self.data {
            TensorData::U8(_) => (0u8, 1usize),
            TensorData::F32(_) => (1u8, 4usize),
        };
        let n: usize = self.dims.iter().product();
        let mut out = Vec::with_capacity(13 + 4 * self.dims.len() + n * elem);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(code);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "HOFF tensor",
        };
        let t = read_record(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::format(
                "HOFF tensor",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.what,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_record(r: &mut Reader<'_>) -> Result<Tensor> {
    if r.take(4)? != MAGIC {
        return Err(Error::format(r.what, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            r.what,
            format!("unsupported version {version}"),
        ));
    }
    let code = r.take(1)?[0];
    let ndim = r.u32()? as usize;
    let mut dims = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(r.what, "element count overflows"))?;
    let data = match code {
        0 => TensorData::U8(r.take(n)?.to_vec()),
        1 => {
            let bytes = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::format(r.what, "payload overflows"))?,
            )?;
            TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(Error::format(r.what, format!("unknown dtype code {other}"))),
    };
    Ok(Tensor { dims, data })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Named tensors stored together in one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("HOFF archive", format!("missing entry `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Store UTF-8 text as a 1-d `u8` tensor.
    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes().to_vec();
        self.insert(name, Tensor::u8(vec![bytes.len()], bytes));
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        String::from_utf8(t.as_u8()?.to_vec())
            .map_err(|_| Error::format("HOFF archive", format!("entry `{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rec = t.to_bytes();
            out.extend_from_slice(&(rec.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "HOFF archive",
        };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::format("HOFF archive", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                "HOFF archive",
                format!("unsupported version {version}"),
            ));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("HOFF archive", "entry name is not UTF-8"))?
                .to_string();
            let rec_len = r.u64()? as usize;
            let rec = r.take(rec_len)?;
            entries.insert(name, Tensor::from_bytes(rec)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("HOFF archive", "trailing bytes"));
        }
        Ok(Archive { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
