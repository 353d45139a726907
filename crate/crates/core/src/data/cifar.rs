use std::path::Path;

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100Fine,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100Fine => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100Fine => 100,
        }
    }
}

/// Decodes the standard binary distribution of CIFAR-10 / CIFAR-100.
pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Format {
            what: format!("truncated record ({} trailing bytes, record is {rec})", bytes.len() - whole),
            offset: whole as u64,
        });
    }
    let n = bytes.len() / rec;
    let k = variant.num_classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        // CIFAR-100 records carry the coarse label first; the fine label is used.
        let label_at = variant.label_bytes() - 1;
        let label = record[label_at] as usize;
        if label >= k {
            return Err(Error::Format {
                what: format!("label {label} >= {k}"),
                offset: (i * rec + label_at) as u64,
            });
        }
        labels.push(label);
        pixels.extend(record[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    let mut ds = Dataset::new(ImageSet::new(n, 3, 32, 32, pixels)?, labels, k)?;
    if variant == CifarVariant::Cifar10 {
        ds.class_names = Some(CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect());
    }
    Ok(ds)
}

/// Reads one or more concatenated batch files.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_binary(&bytes, variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_arithmetic() {
        let bytes = vec![3u8; 30730];
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.labels.iter().all(|&l| l == 3));
    }

    #[test]
    fn rejects_bad_label_with_offset() {
        let mut bytes = vec![0u8; 2 * 3073];
        bytes[3073] = 255;
        match parse_cifar_binary(&bytes, CifarVariant::Cifar10) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncation() {
        let bytes = vec![0u8; 3073 + 10];
        assert!(matches!(
            parse_cifar_binary(&bytes, CifarVariant::Cifar10),
            Err(Error::Format { offset: 3073, .. })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = vec![0u8; 3074];
        bytes[0] = 4;
        bytes[1] = 77;
        bytes[2] = 255;
        let ds = parse_cifar_binary(&bytes, CifarVariant::Cifar100Fine).unwrap();
        assert_eq!(ds.labels, vec![77]);
        assert_eq!(ds.images.pixels[0], 1.0);
    }
}
