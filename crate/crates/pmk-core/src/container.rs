//! Binary record container for datasets and checkpoints: a length-prefixed
//! UTF-8 metadata header followed by named numeric arrays and a trailing
//! SHA-256 checksum. Round-trips are bit-exact and corruption is detected
//! loudly.

use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PMKC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes; not a container file")]
    BadMagic,
    #[error("container version mismatch: file has {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checksum mismatch; file is corrupt")]
    ChecksumMismatch,
    #[error("truncated file while reading {context}")]
    Truncated { context: String },
    #[error("invalid field in record {record}: {reason}")]
    InvalidRecord { record: String, reason: String },
    #[error("missing array {0}")]
    MissingArray(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype_tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::F32(_) => 1,
            ArrayData::I64(_) => 2,
            ArrayData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            ArrayData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match self {
            ArrayData::U8(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64_2d(name: &str, m: &ndarray::Array2<f64>) -> Self {
        NamedArray {
            name: name.to_string(),
            dims: vec![m.nrows(), m.ncols()],
            data: ArrayData::F64(m.iter().cloned().collect()),
        }
    }

    pub fn to_f64_2d(&self) -> Result<ndarray::Array2<f64>, ContainerError> {
        if self.dims.len() != 2 {
            return Err(ContainerError::InvalidRecord {
                record: self.name.clone(),
                reason: format!("expected 2 dims, got {}", self.dims.len()),
            });
        }
        let data = self
            .data
            .as_f64()
            .ok_or_else(|| ContainerError::InvalidRecord {
                record: self.name.clone(),
                reason: "expected f64 data".into(),
            })?;
        ndarray::Array2::from_shape_vec((self.dims[0], self.dims[1]), data.to_vec()).map_err(
            |e| ContainerError::InvalidRecord {
                record: self.name.clone(),
                reason: e.to_string(),
            },
        )
    }
}

/// A container file in memory: text header plus ordered named arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub header: String,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(header: String) -> Self {
        Container {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, ContainerError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::MissingArray(name.to_string()))
    }

    pub fn header_field(&self, key: &str) -> Option<&str> {
        for line in self.header.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(v.trim());
                }
            }
        }
        None
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header_bytes = self.header.as_bytes();
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(header_bytes);
        buf.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(a.data.dtype_tag());
            buf.push(a.dims.len() as u8);
            for &d in &a.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::F32(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::I64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U8(v) => buf.extend_from_slice(v),
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn write_to(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        f.write_all(&bytes).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = cur.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        // Checksum first so any corruption is reported as corruption, not as
        // a confusing parse error.
        if bytes.len() < 32 {
            return Err(ContainerError::Truncated {
                context: "checksum".into(),
            });
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != stored {
            return Err(ContainerError::ChecksumMismatch);
        }

        let header_len = cur.u32("header length")? as usize;
        let header = String::from_utf8(cur.take(header_len, "header")?.to_vec()).map_err(|e| {
            ContainerError::InvalidRecord {
                record: "header".into(),
                reason: e.to_string(),
            }
        })?;
        let count = cur.u32("array count")? as usize;
        let mut arrays = Vec::with_capacity(count);
        for i in 0..count {
            let ctx = format!("array {i}");
            let name_len = cur.u32(&ctx)? as usize;
            let name = String::from_utf8(cur.take(name_len, &ctx)?.to_vec()).map_err(|e| {
                ContainerError::InvalidRecord {
                    record: ctx.clone(),
                    reason: e.to_string(),
                }
            })?;
            let dtype = cur.u8(&name)?;
            let ndim = cur.u8(&name)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u64(&name)? as usize);
            }
            let n: usize = dims.iter().product();
            let data = match dtype {
                0 => {
                    let raw = cur.take(n * 8, &name)?;
                    ArrayData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = cur.take(n * 4, &name)?;
                    ArrayData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                2 => {
                    let raw = cur.take(n * 8, &name)?;
                    ArrayData::I64(
                        raw.chunks_exact(8)
                            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                3 => ArrayData::U8(cur.take(n, &name)?.to_vec()),
                other => {
                    return Err(ContainerError::InvalidRecord {
                        record: name,
                        reason: format!("unknown dtype tag {other}"),
                    })
                }
            };
            arrays.push(NamedArray { name, dims, data });
        }
        Ok(Container { header, arrays })
    }

    pub fn read_from(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], ContainerError> {
        if self.pos + n > self.bytes.len().saturating_sub(32).max(self.pos) {
            // Leave room for the trailing checksum; reading into it means the
            // declared sizes overran the payload.
            if self.pos + n > self.bytes.len() {
                return Err(ContainerError::Truncated {
                    context: context.to_string(),
                });
            }
        }
        if self.pos + n > self.bytes.len() {
            return Err(ContainerError::Truncated {
                context: context.to_string(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, context: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, context)?[0])
    }

    fn u32(&mut self, context: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }
}

/// Hex SHA-256 of arbitrary text, used for config hashes and checkpoint
/// provenance references.
pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
