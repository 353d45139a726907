//! Version-tagged binary container of named tensors.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "RGCK" | version u32 | elem_bytes u8 | count u32
//! count x { role u8 (0 param, 1 buffer) | name_len u32 | name utf-8
//!           | rank u32 | dims u64 x rank | values }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T> NamedTensor<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::PRECISION.byte_width() as u8);
        let count = (self.params.len() + self.buffers.len()) as u32;
        out.extend_from_slice(&count.to_le_bytes());
        let entries = self
            .params
            .iter()
            .map(|p| (0u8, p))
            .chain(self.buffers.iter().map(|b| (1u8, b)));
        for (role, nt) in entries {
            out.push(role);
            out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
            out.extend_from_slice(nt.name.as_bytes());
            out.extend_from_slice(&(nt.tensor.shape().len() as u32).to_le_bytes());
            for &d in nt.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            T::to_le_bytes_vec(nt.tensor.data(), &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::PRECISION.byte_width() {
            return Err(r.error(format!(
                "checkpoint stores {width}-byte values, expected {}",
                T::PRECISION.byte_width()
            )));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint {
            params: Vec::new(),
            buffers: Vec::new(),
        };
        for _ in 0..count {
            let role = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error("tensor name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r
                .take(numel(&shape) * width)?
                .chunks_exact(width)
                .map(T::from_le_chunk)
                .collect();
            let nt = NamedTensor::new(name, Tensor::new(shape, data)?);
            match role {
                0 => ckpt.params.push(nt),
                1 => ckpt.buffers.push(nt),
                other => return Err(r.error(format!("unknown tensor role {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after checkpoint"));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, what: impl Into<String>) -> Error {
        Error::Format {
            what: what.into(),
            offset: self.pos as u64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("truncated checkpoint"));
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

pub fn write_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = Checkpoint {
            params: vec![NamedTensor::new(
                "w",
                Tensor::<f32>::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap(),
            )],
            buffers: vec![NamedTensor::new("bn.running_var", Tensor::full(&[3], 1.0f32))],
        };
        let back = Checkpoint::<f32>::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint<f32>| -> Vec<u32> { c.params[0].tensor.data().iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&back), bits(&ckpt));
    }

    #[test]
    fn precision_mismatch_and_truncation_rejected() {
        let ckpt = Checkpoint {
            params: vec![NamedTensor::new("w", Tensor::full(&[4], 2.0f32))],
            buffers: vec![],
        };
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
