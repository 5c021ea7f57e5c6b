//! Tensor archive file format.
//!
//! ```text
//! offset  field
//! 0       magic            4 bytes  "ATTE"
//! 4       version          u16 LE   (currently 1)
//! 6       tensor count     u32 LE
//! 10      metadata length  u32 LE, then that many bytes of UTF-8
//!                          `key=value` lines
//!         per tensor header:
//!           name length    u16 LE, then UTF-8 name
//!           dtype          u8       (0 = f32, 1 = f64)
//!           rank           u8
//!           extents        rank × u64 LE
//!         payloads, in header order, little-endian IEEE-754, row-major
//! ```
//!
//! Trailing bytes after the last payload are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::real::DType;
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ATTE";
pub const VERSION: u16 = 1;

/// A tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) {
        self.tensors.push((name.into(), t.into()));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CorruptArchive(format!("missing metadata key `{key}`")))
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::config(format!("metadata entry `{k}` not representable")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::config("tensor name too long"));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            let dtype = match t {
                AnyTensor::F32(_) => DType::F32,
                AnyTensor::F64(_) => DType::F64,
            };
            out.push(dtype.code());
            let shape = t.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::config("tensor rank too large"));
            }
            out.push(shape.len() as u8);
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            match t {
                AnyTensor::F32(t) => write_payload(t, &mut out),
                AnyTensor::F64(t) => write_payload(t, &mut out),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptArchive("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::ArchiveVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::CorruptArchive("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptArchive(format!("metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptArchive("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::CorruptArchive(format!("unknown dtype for `{name}`")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(e).map_err(|_| {
                    Error::CorruptArchive(format!("extent overflow in `{name}`"))
                })?);
            }
            headers.push((name, dtype, shape));
        }
        let mut tensors = Vec::with_capacity(headers.len());
        for (name, dtype, shape) in headers {
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::CorruptArchive(format!("extent overflow in `{name}`")))?;
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::CorruptArchive(format!("payload overflow in `{name}`")))?;
            let payload = r.take(nbytes)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_payload(&name, shape, payload)?),
                DType::F64 => AnyTensor::F64(read_payload(&name, shape, payload)?),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptArchive(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_payload<R: Real>(t: &Tensor<R>, out: &mut Vec<u8>) {
    out.reserve(t.len() * R::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_payload<R: Real>(name: &str, shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<R>> {
    let data = bytes.chunks_exact(R::DTYPE.size()).map(R::read_le).collect();
    Tensor::new(shape, data).map_err(|_| Error::CorruptArchive(format!("non-finite payload in `{name}`")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptArchive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
