//! Desk-scale stand-in for CIFAR: each class is a small arrangement of
//! oriented bars, blobs and rings. Samples vary in placement, orientation,
//! scale, mirroring, colour and pixel noise, so class identity lives in the
//! geometry rather than in colour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default = "default_shape")]
    pub shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "default_pixel_noise")]
    pub pixel_noise: f64,
    /// Maximum translation, in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: f64,
    /// Maximum rotation, in radians.
    #[serde(default = "default_rotation")]
    pub max_rotation: f64,
    /// Random shapes added to every sample, unrelated to its class.
    #[serde(default = "default_distractors")]
    pub distractors: usize,
}

fn default_classes() -> usize {
    10
}
fn default_train() -> usize {
    4000
}
fn default_test() -> usize {
    1000
}
fn default_shape() -> [usize; 3] {
    [3, 16, 16]
}
fn default_pixel_noise() -> f64 {
    0.12
}
fn default_shift() -> f64 {
    2.5
}
fn default_rotation() -> f64 {
    0.5
}
fn default_distractors() -> usize {
    1
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: default_classes(),
            n_train: default_train(),
            n_test: default_test(),
            shape: default_shape(),
            seed: 0,
            pixel_noise: default_pixel_noise(),
            max_shift: default_shift(),
            max_rotation: default_rotation(),
            distractors: default_distractors(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Bar { x: f64, y: f64, angle: f64, len: f64, width: f64 },
    Blob { x: f64, y: f64, sigma: f64 },
    Ring { x: f64, y: f64, radius: f64, width: f64 },
}

type Template = Vec<Primitive>;

struct Pose {
    dx: f64,
    dy: f64,
    rot: f64,
    scale: f64,
    mirror: bool,
}

impl Primitive {
    fn random<R: Rng>(rng: &mut R) -> Primitive {
        let x = rng.gen_range(0.25..0.75);
        let y = rng.gen_range(0.25..0.75);
        match rng.gen_range(0..3) {
            0 => Primitive::Bar {
                x,
                y,
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                len: rng.gen_range(0.35..0.7),
                width: rng.gen_range(0.08..0.14),
            },
            1 => Primitive::Blob {
                x,
                y,
                sigma: rng.gen_range(0.06..0.12),
            },
            _ => Primitive::Ring {
                x,
                y,
                radius: rng.gen_range(0.14..0.25),
                width: rng.gen_range(0.06..0.1),
            },
        }
    }

    /// Coverage in `[0, 1]` at a point in unit coordinates.
    fn coverage(&self, px: f64, py: f64, pose: &Pose, soft: f64) -> f64 {
        let centre = |x: f64, y: f64| {
            let (x, y) = (x - 0.5, y - 0.5);
            let (s, c) = pose.rot.sin_cos();
            let (x, y) = (pose.scale * (c * x - s * y), pose.scale * (s * x + c * y));
            let x = if pose.mirror { -x } else { x };
            (x + 0.5 + pose.dx, y + 0.5 + pose.dy)
        };
        let edge = |d: f64| (0.5 - d / soft).clamp(0.0, 1.0);
        match *self {
            Primitive::Bar { x, y, angle, len, width } => {
                let (cx, cy) = centre(x, y);
                let a = if pose.mirror { std::f64::consts::PI - angle - pose.rot } else { angle + pose.rot };
                let (s, c) = a.sin_cos();
                let (rx, ry) = (px - cx, py - cy);
                let along = (rx * c + ry * s).clamp(-len * pose.scale / 2.0, len * pose.scale / 2.0);
                let d = ((rx - along * c).powi(2) + (ry - along * s).powi(2)).sqrt();
                edge(d - width * pose.scale / 2.0)
            }
            Primitive::Blob { x, y, sigma } => {
                let (cx, cy) = centre(x, y);
                let s = sigma * pose.scale;
                (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * s * s)).exp()
            }
            Primitive::Ring { x, y, radius, width } => {
                let (cx, cy) = centre(x, y);
                let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                edge((r - radius * pose.scale).abs() - width * pose.scale / 2.0)
            }
        }
    }
}

fn render_mask(t: &Template, h: usize, w: usize, pose: &Pose) -> Vec<f64> {
    let soft = 1.0 / h.max(w) as f64;
    let mut out = vec![0.0; h * w];
    for (i, v) in out.iter_mut().enumerate() {
        let py = ((i / w) as f64 + 0.5) / h as f64;
        let px = ((i % w) as f64 + 0.5) / w as f64;
        *v = t.iter().map(|p| p.coverage(px, py, pose, soft)).fold(0.0, f64::max);
    }
    out
}

const IDENTITY: Pose = Pose {
    dx: 0.0,
    dy: 0.0,
    rot: 0.0,
    scale: 1.0,
    mirror: false,
};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / (a.len() as f64).sqrt()
}

/// Draws class templates, rejecting any too close to an earlier one (or to
/// its mirror image, since samples are mirrored at random).
fn draw_templates<R: Rng>(k: usize, h: usize, w: usize, rng: &mut R) -> Vec<Template> {
    let mirrored = Pose { mirror: true, ..IDENTITY };
    let mut templates: Vec<Template> = Vec::with_capacity(k);
    let mut masks: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(k);
    let mut threshold = 0.3;
    let mut attempts = 0;
    while templates.len() < k {
        let parts = rng.gen_range(2..=3);
        let t: Template = (0..parts).map(|_| Primitive::random(rng)).collect();
        let m = render_mask(&t, h, w, &IDENTITY);
        let mm = render_mask(&t, h, w, &mirrored);
        let far = masks
            .iter()
            .all(|(a, b)| distance(&m, a).min(distance(&m, b)).min(distance(&mm, a)) > threshold);
        attempts += 1;
        if far {
            templates.push(t);
            masks.push((m, mm));
        } else if attempts % 200 == 0 {
            threshold *= 0.9;
        }
    }
    templates
}

fn render_split<R: Rng>(
    templates: &[Template],
    n: usize,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    let k = templates.len();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    let noise = Normal::new(0.0, spec.pixel_noise.max(0.0)).map_err(|e| Error::invalid("synthetic", e.to_string()))?;
    let shift = spec.max_shift / h.max(w) as f64;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    for &label in &labels {
        let pose = Pose {
            dx: rng.gen_range(-shift..=shift),
            dy: rng.gen_range(-shift..=shift),
            rot: rng.gen_range(-spec.max_rotation..=spec.max_rotation),
            scale: rng.gen_range(0.85..1.15),
            mirror: rng.gen_bool(0.5),
        };
        let mut mask = render_mask(&templates[label], h, w, &pose);
        for _ in 0..spec.distractors {
            let extra = render_mask(&vec![Primitive::random(rng)], h, w, &IDENTITY);
            mask.iter_mut().zip(extra).for_each(|(m, e)| *m = m.max(0.7 * e));
        }
        let bg: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..0.35)).collect();
        let fg: Vec<f64> = (0..c).map(|_| rng.gen_range(0.6..1.0)).collect();
        for ch in 0..c {
            for &m in &mask {
                let v = bg[ch] + (fg[ch] - bg[ch]) * m + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Dataset::new(ImageSet::new(n, c, h, w, pixels)?, labels, k)
}

/// Returns `(train, test)`, both exactly class-balanced when the sizes are
/// multiples of the class count.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 {
        return Err(Error::invalid("synthetic", "need at least 2 classes"));
    }
    let [c, h, w] = spec.shape;
    if c == 0 || h < 4 || w < 4 {
        return Err(Error::invalid("synthetic", format!("shape {:?} too small", spec.shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates = draw_templates(spec.num_classes, h, w, &mut rng);
    rng.set_stream(1);
    let train = render_split(&templates, spec.n_train, spec, &mut rng)?;
    rng.set_stream(2);
    let test = render_split(&templates, spec.n_test, spec, &mut rng)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec {
            n_train: 200,
            n_test: 50,
            ..SyntheticSpec::default()
        };
        let (a, at) = generate_synthetic_dataset(&spec).unwrap();
        let (b, bt) = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(at, bt);
        assert!(a.class_histogram().iter().all(|&c| c == 20));
        assert!(a.images.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let other = generate_synthetic_dataset(&SyntheticSpec { seed: 1, ..spec }).unwrap().0;
        assert_ne!(a.images.pixels, other.images.pixels);
    }

    #[test]
    fn rejects_single_class() {
        let spec = SyntheticSpec {
            num_classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic_dataset(&spec).is_err());
    }
}
