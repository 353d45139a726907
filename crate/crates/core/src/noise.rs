//! Synthetic label noise with exact corruption counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::data::{Dataset, NoisyDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    AsymmetricCifar10,
    AsymmetricNextClass,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::AsymmetricCifar10 => "asymmetric_cifar10",
            NoiseKind::AsymmetricNextClass => "asymmetric_next_class",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid("noise", format!("rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

/// `truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog`.
pub const CIFAR10_FLIPS: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

fn cifar10_target(label: usize) -> Option<usize> {
    CIFAR10_FLIPS.iter().find(|&&(from, _)| from == label).map(|&(_, to)| to)
}

/// `floor(rate * n)`, robust to representation error in `rate`.
pub fn corrupted_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor() as usize
}

fn apply<F>(ds: &Dataset, spec: &NoiseSpec, mut relabel: F) -> Result<NoisyDataset>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> usize,
{
    spec.validate()?;
    let n = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = rand::seq::index::sample(&mut rng, n, corrupted_count(spec.rate, n)).into_vec();
    let mut noisy = ds.labels.clone();
    // Sorted so the relabelling draws do not depend on the sampler's output order.
    let mut chosen = chosen;
    chosen.sort_unstable();
    for i in chosen {
        noisy[i] = relabel(ds.labels[i], &mut rng);
    }
    let mask = noisy.iter().zip(&ds.labels).map(|(a, b)| a != b).collect();
    Ok(NoisyDataset {
        images: Arc::clone(&ds.images),
        true_labels: Some(ds.labels.clone()),
        noisy_labels: noisy,
        corruption_mask: Some(mask),
        num_classes: ds.num_classes,
        class_names: ds.class_names.clone(),
    })
}

/// Each selected label moves to a uniformly chosen *different* class.
pub fn inject_symmetric(ds: &Dataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    let k = ds.num_classes;
    if k < 2 {
        return Err(Error::invalid("inject_symmetric", "need at least 2 classes"));
    }
    apply(ds, spec, |y, rng| {
        let r = rng.gen_range(0..k - 1);
        if r < y {
            r
        } else {
            r + 1
        }
    })
}

pub fn inject_asymmetric_cifar10(ds: &Dataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    if ds.num_classes != 10 {
        return Err(Error::invalid(
            "inject_asymmetric_cifar10",
            format!("expected 10 classes, got {}", ds.num_classes),
        ));
    }
    apply(ds, spec, |y, _| cifar10_target(y).unwrap_or(y))
}

pub fn inject_asymmetric_next_class(ds: &Dataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    let k = ds.num_classes;
    if k < 2 {
        return Err(Error::invalid("inject_asymmetric_next_class", "need at least 2 classes"));
    }
    apply(ds, spec, |y, _| (y + 1) % k)
}

/// Dispatches on `spec.kind`.
pub fn inject_noise(ds: &Dataset, spec: &NoiseSpec) -> Result<NoisyDataset> {
    match spec.kind {
        NoiseKind::Symmetric => inject_symmetric(ds, spec),
        NoiseKind::AsymmetricCifar10 => inject_asymmetric_cifar10(ds, spec),
        NoiseKind::AsymmetricNextClass => inject_asymmetric_next_class(ds, spec),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseStats {
    pub actual_rate: f64,
    pub corrupted: usize,
    /// `confusion[true][noisy]`.
    pub confusion: Vec<Vec<usize>>,
}

/// `None` when the dataset carries no ground truth.
pub fn noise_stats(ds: &NoisyDataset) -> Option<NoiseStats> {
    let truth = ds.true_labels.as_ref()?;
    let k = ds.num_classes;
    let mut confusion = vec![vec![0; k]; k];
    for (&t, &y) in truth.iter().zip(&ds.noisy_labels) {
        confusion[t][y] += 1;
    }
    let corrupted = truth.iter().zip(&ds.noisy_labels).filter(|(a, b)| a != b).count();
    Some(NoiseStats {
        actual_rate: corrupted as f64 / ds.len().max(1) as f64,
        corrupted,
        confusion,
    })
}
