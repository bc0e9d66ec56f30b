//! Binary tensor container.
//!
//! ```text
//! "SFFC" | u32 version | u32 count
//! per tensor: u16 name_len | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | payload
//! ```
//!
//! All integers and payloads are little-endian. Dtype 0 is `f32`, 1 is `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{dtype_width, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFFC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_scalar<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            0 => StoredTensor::F32(t.cast()),
            _ => StoredTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => 0,
            StoredTensor::F64(_) => 1,
        }
    }

    /// The tensor as `T`, failing unless the stored dtype is exactly `T`.
    pub fn to_scalar<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored dtype {} cannot be read as {}", self.dtype(), T::NAME)));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name of {} bytes is too long", nb.len())));
            }
            out.extend((nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dtype());
            let shape = t.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Checkpoint(format!("rank {} too large", shape.len())));
            }
            out.push(shape.len() as u8);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?;
                out.extend(d.to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint container".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "container version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let width = dtype_width(dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {dtype}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r
                .take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)
                .map_err(|_| Error::Checkpoint(format!("payload of `{name}` is truncated")))?;
            let t = match dtype {
                0 => StoredTensor::F32(Tensor::from_vec(&shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
                _ => StoredTensor::F64(Tensor::from_vec(&shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
            };
            tensors.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", bytes.len() - r.at)));
        }
        Ok(Container { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.at..e];
                self.at = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint("unexpected end of checkpoint".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// `dir/stem.meta.json` next to `dir/stem.ext`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}
