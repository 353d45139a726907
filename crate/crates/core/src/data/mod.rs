//! In-memory datasets plus the on-disk formats the harness reads and writes.

mod cifar;
mod container;
mod synthetic;

use std::sync::Arc;

pub use cifar::{load_cifar_binary, parse_cifar_binary, CifarVariant, CIFAR10_CLASSES};
pub use container::{decode_container, encode_container, read_container, write_container};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

use crate::error::{Error, Result};

/// `N x C x H x W` pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl ImageSet {
    pub fn new(n: usize, c: usize, h: usize, w: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != n * c * h * w {
            return Err(Error::invalid(
                "image_set",
                format!("{} pixels for {n}x{c}x{h}x{w}", pixels.len()),
            ));
        }
        Ok(ImageSet { n, c, h, w, pixels })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    /// Gathers the given images into one contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }
}

/// Images with their (trusted) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Arc<ImageSet>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(images: ImageSet, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.n {
            return Err(Error::invalid("dataset", format!("{} labels for {} images", labels.len(), images.n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset {
            images: Arc::new(images),
            labels,
            num_classes,
            class_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// Reorders samples; used by permutation-invariance checks.
    pub fn permuted(&self, order: &[usize]) -> Dataset {
        Dataset {
            images: Arc::new(ImageSet {
                pixels: self.images.gather(order),
                ..*self.images.as_ref()
            }),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }
}

/// Training data whose labels may be corrupted.
///
/// `true_labels` and `corruption_mask` are present when the ground truth is
/// known (synthetic noise); they are used only for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub images: Arc<ImageSet>,
    pub true_labels: Option<Vec<usize>>,
    pub noisy_labels: Vec<usize>,
    pub corruption_mask: Option<Vec<bool>>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl NoisyDataset {
    /// Wraps clean data: noisy labels equal the true labels.
    pub fn clean(ds: &Dataset) -> Self {
        NoisyDataset {
            images: Arc::clone(&ds.images),
            true_labels: Some(ds.labels.clone()),
            noisy_labels: ds.labels.clone(),
            corruption_mask: Some(vec![false; ds.len()]),
            num_classes: ds.num_classes,
            class_names: ds.class_names.clone(),
        }
    }

    /// Labels of unknown quality, no ground truth.
    pub fn without_truth(ds: &Dataset) -> Self {
        NoisyDataset {
            true_labels: None,
            corruption_mask: None,
            ..NoisyDataset::clean(ds)
        }
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    /// Fraction of samples whose label was corrupted, when known.
    pub fn clean_fraction(&self) -> Option<f64> {
        self.corruption_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&c| !c).count() as f64 / m.len().max(1) as f64)
    }

    /// The dataset as seen by the learner.
    pub fn observed(&self) -> Dataset {
        Dataset {
            images: Arc::clone(&self.images),
            labels: self.noisy_labels.clone(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }
}
