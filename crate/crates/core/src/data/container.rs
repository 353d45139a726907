//! Binary dataset container.
//!
//! Layout (little-endian): magic `RGDS`, version `u32`, then `N C H W K` and a
//! flag word as `u32`. The payload follows: `N*C*H*W` pixels as `f32`, the
//! observed labels as `u32`, then the true labels (`u32`, flag bit 0), the
//! corruption mask (one byte per sample, flag bit 1) and the class names
//! (`u32` length + UTF-8 per class, flag bit 2).

use std::path::Path;
use std::sync::Arc;

use super::{ImageSet, NoisyDataset};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RGDS";
const VERSION: u32 = 1;
const HAS_TRUE: u32 = 1;
const HAS_MASK: u32 = 2;
const HAS_NAMES: u32 = 4;

pub fn encode_container(ds: &NoisyDataset) -> Vec<u8> {
    let img = ds.images.as_ref();
    let mut flags = 0;
    if ds.true_labels.is_some() {
        flags |= HAS_TRUE;
    }
    if ds.corruption_mask.is_some() {
        flags |= HAS_MASK;
    }
    if ds.class_names.is_some() {
        flags |= HAS_NAMES;
    }
    let mut out = Vec::with_capacity(32 + img.pixels.len() * 4 + ds.len() * 9);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, img.n as u32, img.c as u32, img.h as u32, img.w as u32, ds.num_classes as u32, flags] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &img.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let put_labels = |out: &mut Vec<u8>, labels: &[usize]| {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    };
    put_labels(&mut out, &ds.noisy_labels);
    if let Some(t) = &ds.true_labels {
        put_labels(&mut out, t);
    }
    if let Some(m) = &ds.corruption_mask {
        out.extend(m.iter().map(|&b| b as u8));
    }
    if let Some(names) = &ds.class_names {
        for name in names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, what: impl Into<String>) -> Error {
        Error::Format {
            what: what.into(),
            offset: self.pos as u64,
        }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.err(format!("truncated container (need {len} more bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn labels(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        (0..n)
            .map(|_| {
                let at = self.pos;
                let l = self.u32()? as usize;
                if l >= k {
                    return Err(Error::Format {
                        what: format!("label {l} >= {k}"),
                        offset: at as u64,
                    });
                }
                Ok(l)
            })
            .collect()
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<NoisyDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            what: "bad magic".into(),
            offset: 0,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            what: format!("unsupported version {version}"),
            offset: 4,
        });
    }
    let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let (n, c, h, w, k) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let flags = r.u32()?;
    if flags & !(HAS_TRUE | HAS_MASK | HAS_NAMES) != 0 {
        return Err(Error::Format {
            what: format!("unknown flags {flags:#x}"),
            offset: 28,
        });
    }
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| r.err("image dimensions overflow"))?;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| r.err("payload overflow"))?)?;
    let pixels = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let noisy_labels = r.labels(n, k)?;
    let true_labels = if flags & HAS_TRUE != 0 { Some(r.labels(n, k)?) } else { None };
    let corruption_mask = if flags & HAS_MASK != 0 {
        let at = r.pos;
        let raw = r.take(n)?;
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(Error::Format {
                what: format!("mask byte {}", raw[i]),
                offset: (at + i) as u64,
            });
        }
        Some(raw.iter().map(|&b| b == 1).collect())
    } else {
        None
    };
    let class_names = if flags & HAS_NAMES != 0 {
        let mut names = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u32()? as usize;
            let at = r.pos;
            let s = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format {
                what: "class name is not UTF-8".into(),
                offset: at as u64,
            })?;
            names.push(s.to_string());
        }
        Some(names)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(NoisyDataset {
        images: Arc::new(ImageSet::new(n, c, h, w, pixels)?),
        true_labels,
        noisy_labels,
        corruption_mask,
        num_classes: k,
        class_names,
    })
}

pub fn write_container(path: &Path, ds: &NoisyDataset) -> Result<()> {
    std::fs::write(path, encode_container(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<NoisyDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
