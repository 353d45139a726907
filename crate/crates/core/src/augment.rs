//! Weak and strong augmentation, dual-view batches and mixup.
//!
//! Every random draw comes from a generator keyed by
//! `(seed, epoch, sample index, view)`, so the augmentation of a sample never
//! depends on which batch it lands in or on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    #[default]
    None,
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub kind: AugKind,
    #[serde(default = "default_padding")]
    pub crop_padding: usize,
    #[serde(default = "default_half")]
    pub flip_prob: f64,
    /// Side of the cutout square; `None` means `floor(min(H, W) / 2)`.
    #[serde(default)]
    pub cutout: Option<usize>,
    #[serde(default = "default_gray")]
    pub grayscale_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - j, 1 + j]`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_half")]
    pub blur_prob: f64,
    #[serde(default = "default_sigma")]
    pub blur_sigma: (f64, f64),
}

fn default_padding() -> usize {
    4
}
fn default_half() -> f64 {
    0.5
}
fn default_gray() -> f64 {
    0.2
}
fn default_jitter() -> f64 {
    0.4
}
fn default_sigma() -> (f64, f64) {
    (0.1, 2.0)
}

impl AugPolicy {
    pub fn of_kind(kind: AugKind) -> Self {
        AugPolicy {
            kind,
            crop_padding: default_padding(),
            flip_prob: default_half(),
            cutout: None,
            grayscale_prob: default_gray(),
            jitter: default_jitter(),
            blur_prob: default_half(),
            blur_sigma: default_sigma(),
        }
    }

    pub fn none() -> Self {
        Self::of_kind(AugKind::None)
    }

    pub fn weak() -> Self {
        Self::of_kind(AugKind::Weak)
    }

    pub fn strong() -> Self {
        Self::of_kind(AugKind::Strong)
    }

    pub fn cutout_side(&self, shape: [usize; 3]) -> usize {
        self.cutout.unwrap_or(shape[1].min(shape[2]) / 2)
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("aug_policy", format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("aug_policy", format!("jitter {} outside [0, 1)", self.jitter)));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("aug_policy", format!("blur sigma range ({lo}, {hi})")));
        }
        let [_, h, w] = shape;
        if self.kind != AugKind::None && self.crop_padding >= h.min(w) {
            return Err(Error::invalid(
                "aug_policy",
                format!("crop padding {} needs images larger than {h}x{w}", self.crop_padding),
            ));
        }
        if self.cutout_side(shape) > h.min(w) {
            return Err(Error::invalid(
                "aug_policy",
                format!("cutout {} larger than {h}x{w}", self.cutout_side(shape)),
            ));
        }
        Ok(())
    }
}

/// Key of a counter-based random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
    pub view: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SampleKey {
    pub fn new(seed: u64, epoch: u64, index: u64, view: u64) -> Self {
        SampleKey { seed, epoch, index, view }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = splitmix64(self.seed);
        for part in [self.epoch, self.index, self.view] {
            h = splitmix64(h ^ part);
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Crops an `H x W` window at offset `(dy, dx)` of the reflect-padded image,
/// then mirrors horizontally when `flip` is set.
pub fn crop_flip(image: &[f32], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y as isize + dy as isize - pad as isize, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + dx as isize - pad as isize, w);
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) as f32
}

/// Brightness, contrast, then saturation; clamped after each step.
pub fn color_jitter(image: &mut [f32], shape: [usize; 3], brightness: f32, contrast: f32, saturation: f32) {
    let [c, h, w] = shape;
    let plane = h * w;
    image.iter_mut().for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let mean = if c == 3 {
        (0..plane)
            .map(|i| luminance(image[i], image[plane + i], image[2 * plane + i]) as f64)
            .sum::<f64>()
            / plane as f64
    } else {
        image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64
    } as f32;
    image.iter_mut().for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    if c == 3 {
        for i in 0..plane {
            let g = luminance(image[i], image[plane + i], image[2 * plane + i]);
            for ch in 0..3 {
                let v = &mut image[ch * plane + i];
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Replaces RGB with its luminance; other channel counts are left alone.
pub fn grayscale(image: &mut [f32], shape: [usize; 3]) {
    let [c, h, w] = shape;
    if c != 3 {
        return;
    }
    let plane = h * w;
    for i in 0..plane {
        let g = luminance(image[i], image[plane + i], image[2 * plane + i]);
        for ch in 0..3 {
            image[ch * plane + i] = g;
        }
    }
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur(image: &mut [f32], shape: [usize; 3], sigma: f64) {
    let [c, h, w] = shape;
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|v| (v / total) as f32).collect();
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let img = &mut image[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * img[y * w + reflect(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                img[y * w + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}

/// Zeroes an `side x side` square centred at `(cy, cx)`, clipped at the borders.
pub fn cutout(image: &mut [f32], shape: [usize; 3], side: usize, cy: usize, cx: usize) {
    let [c, h, w] = shape;
    let y0 = cy as isize - (side / 2) as isize;
    let x0 = cx as isize - (side / 2) as isize;
    let ys = y0.max(0) as usize..((y0 + side as isize).max(0) as usize).min(h);
    let xs = x0.max(0) as usize..((x0 + side as isize).max(0) as usize).min(w);
    for ch in 0..c {
        for y in ys.clone() {
            image[(ch * h + y) * w + xs.start..(ch * h + y) * w + xs.end].fill(0.0);
        }
    }
}

pub fn weak_augment<R: Rng>(image: &[f32], shape: [usize; 3], policy: &AugPolicy, rng: &mut R) -> Vec<f32> {
    let pad = policy.crop_padding;
    let dy = rng.gen_range(0..=2 * pad);
    let dx = rng.gen_range(0..=2 * pad);
    let flip = rng.gen_bool(policy.flip_prob);
    crop_flip(image, shape, pad, dy, dx, flip)
}

pub fn strong_augment<R: Rng>(image: &[f32], shape: [usize; 3], policy: &AugPolicy, rng: &mut R) -> Vec<f32> {
    let mut out = weak_augment(image, shape, policy, rng);
    let j = policy.jitter;
    let mut factor = || rng.gen_range(1.0 - j..=1.0 + j) as f32;
    let (b, c, s) = (factor(), factor(), factor());
    color_jitter(&mut out, shape, b, c, s);
    if rng.gen_bool(policy.grayscale_prob) {
        grayscale(&mut out, shape);
    }
    let blur = rng.gen_bool(policy.blur_prob);
    let sigma = rng.gen_range(policy.blur_sigma.0..=policy.blur_sigma.1);
    if blur {
        gaussian_blur(&mut out, shape, sigma);
    }
    let cy = rng.gen_range(0..shape[1]);
    let cx = rng.gen_range(0..shape[2]);
    cutout(&mut out, shape, policy.cutout_side(shape), cy, cx);
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

pub fn augment<R: Rng>(image: &[f32], shape: [usize; 3], policy: &AugPolicy, rng: &mut R) -> Vec<f32> {
    match policy.kind {
        AugKind::None => image.to_vec(),
        AugKind::Weak => weak_augment(image, shape, policy, rng),
        AugKind::Strong => strong_augment(image, shape, policy, rng),
    }
}

/// Augments the listed samples under one view tag, concatenated in order.
pub fn augment_batch(
    images: &ImageSet,
    indices: &[usize],
    seed: u64,
    epoch: u64,
    view: u64,
    policy: &AugPolicy,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(indices.len() * images.image_len());
    for &i in indices {
        let mut rng = SampleKey::new(seed, epoch, i as u64, view).rng();
        out.extend(augment(images.image(i), images.shape(), policy, &mut rng));
    }
    out
}

/// `2N` views: weak views of `indices` first, then strong views in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    /// 0 for the weak half, 1 for the strong half.
    pub views: Vec<u8>,
}

impl DualBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_dual_batch(
    images: &ImageSet,
    indices: &[usize],
    labels: &[usize],
    seed: u64,
    epoch: u64,
    weak: &AugPolicy,
    strong: &AugPolicy,
) -> Result<DualBatch> {
    if indices.is_empty() {
        return Err(Error::invalid("make_dual_batch", "empty batch"));
    }
    let mut pixels = augment_batch(images, indices, seed, epoch, 0, weak);
    pixels.extend(augment_batch(images, indices, seed, epoch, 1, strong));
    let batch_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    Ok(DualBatch {
        pixels,
        labels: batch_labels.iter().chain(&batch_labels).copied().collect(),
        indices: indices.iter().chain(indices).copied().collect(),
        views: std::iter::repeat(0).take(indices.len()).chain(std::iter::repeat(1).take(indices.len())).collect(),
    })
}

/// Convex combination of two batches and their target rows.
pub fn mixup<T: Float>(xa: &[T], pa: &[T], xb: &[T], pb: &[T], lambda: T) -> Result<(Vec<T>, Vec<T>)> {
    if xa.len() != xb.len() || pa.len() != pb.len() {
        return Err(Error::ShapeMismatch {
            op: "mixup",
            lhs: vec![xa.len(), pa.len()],
            rhs: vec![xb.len(), pb.len()],
        });
    }
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::invalid("mixup", format!("lambda {lambda} outside [0, 1]")));
    }
    let mix = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&u, &v)| lambda * u + (T::one() - lambda) * v).collect();
    Ok((mix(xa, xb), mix(pa, pb)))
}
