//! Loss-surface sharpness proxy and Grad-CAM heatmaps.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::tensor::{Float, Tape};
use crate::train::{row_loss, to_float};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessSpec {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_directions")]
    pub directions: usize,
    /// Training samples (the first ones, unaugmented) the loss is measured on.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_every")]
    pub every: usize,
}

fn default_epsilon() -> f64 {
    1e-2
}
fn default_directions() -> usize {
    8
}
fn default_samples() -> usize {
    256
}
fn default_every() -> usize {
    1
}

impl Default for SharpnessSpec {
    fn default() -> Self {
        SharpnessSpec {
            epsilon: default_epsilon(),
            directions: default_directions(),
            samples: default_samples(),
            every: default_every(),
        }
    }
}

impl SharpnessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.directions == 0 || self.samples == 0 {
            return Err(Error::invalid("sharpness", format!("{self:?}")));
        }
        Ok(())
    }
}

/// Random-direction curvature proxy around `theta`.
///
/// For unit Gaussian directions `d` and `s = |theta|`, averages
/// `[L(theta + eps*s*d) + L(theta - eps*s*d) - 2 L(theta)] / (2 eps^2)`.
/// Pairing `+d` with `-d` cancels the first-order term, leaving
/// `s^2 * d'Hd / 2` up to third-order effects.
pub fn estimate_sharpness<F, R>(theta: &[f64], mut loss: F, epsilon: f64, directions: usize, rng: &mut R) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng,
{
    if !(epsilon > 0.0) || directions == 0 {
        return Err(Error::invalid("estimate_sharpness", format!("epsilon {epsilon}, directions {directions}")));
    }
    let scale = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let base = loss(theta)?;
    let mut total = 0.0;
    let mut probe = vec![0.0; theta.len()];
    for _ in 0..directions {
        let mut d: Vec<f64> = (0..theta.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        d.iter_mut().for_each(|v| *v /= norm);
        let mut side = |sign: f64| {
            for ((p, &t), &dv) in probe.iter_mut().zip(theta).zip(&d) {
                *p = t + sign * epsilon * scale * dv;
            }
            loss(&probe)
        };
        let plus = side(1.0)?;
        let minus = side(-1.0)?;
        total += (plus + minus - 2.0 * base) / (2.0 * epsilon * epsilon);
    }
    Ok(total / directions as f64)
}

/// Sharpness proxy of a model's mean cross-entropy on the first
/// `spec.samples` images of `data`, with running batchnorm statistics.
/// The model itself is not modified.
pub fn model_sharpness<T: Float, R: Rng>(model: &Model<T>, data: &Dataset, spec: &SharpnessSpec, rng: &mut R) -> Result<f64> {
    spec.validate()?;
    let n = spec.samples.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let x: Vec<T> = to_float(&data.images.gather(&idx));
    let labels = &data.labels[..n];
    let k = data.num_classes;
    let theta: Vec<f64> = model.params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.as_f64())).collect();
    let mut probe = model.clone();
    probe.set_mode(Mode::Eval);
    estimate_sharpness(
        &theta,
        |flat| {
            let mut at = 0;
            for p in probe.params_mut() {
                for v in p.tensor.data_mut() {
                    *v = T::from_f64_lossy(flat[at]);
                    at += 1;
                }
            }
            let logits = probe.predict(&x, n)?;
            Ok(logits.chunks_exact(k).zip(labels).map(|(row, &y)| row_loss(row, y)).sum::<f64>() / n as f64)
        },
        spec.epsilon,
        spec.directions,
        rng,
    )
}

/// Class-activation heatmap over the last-stage feature grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// Grad-CAM for one `C x H x W` image: channel weights are the spatial means
/// of the class-logit gradient, the map is `ReLU(sum_k w_k A_k)`, min-max
/// normalized (a constant map becomes all zeros).
pub fn grad_cam<T: Float>(model: &Model<T>, image: &[T], class: usize) -> Result<Heatmap> {
    let spec = model.spec();
    if class >= spec.num_classes {
        return Err(Error::invalid("grad_cam", format!("class {class} >= {}", spec.num_classes)));
    }
    let [c, h, w] = spec.input_shape;
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let mut tape = Tape::new();
    // The input requires a gradient so the feature maps are recorded as
    // differentiable nodes even though the parameters are frozen.
    let x = tape.leaf_from(vec![1, c, h, w], image.to_vec(), true)?;
    let pass = eval.forward(&mut tape, x, true)?;
    let features = pass.features.expect("features requested");
    let logit = tape.narrow(pass.logits, 1, class, 1)?;
    let target = tape.sum(logit);
    tape.backward(target)?;
    let shape = tape.shape(features).to_vec();
    let (ch, fh, fw) = (shape[1], shape[2], shape[3]);
    let plane = fh * fw;
    let acts = tape.value(features);
    let zeros = vec![T::zero(); acts.len()];
    let grads = tape.grad(features).unwrap_or(&zeros);
    let mut map = vec![0.0f64; plane];
    for k in 0..ch {
        let alpha = grads[k * plane..(k + 1) * plane].iter().map(|g| g.as_f64()).sum::<f64>() / plane as f64;
        for (m, a) in map.iter_mut().zip(&acts[k * plane..(k + 1) * plane]) {
            *m += alpha * a.as_f64();
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.iter_mut().for_each(|m| *m = (*m - lo) / (hi - lo));
    } else {
        map.iter_mut().for_each(|m| *m = 0.0);
    }
    Ok(Heatmap {
        height: fh,
        width: fw,
        values: map,
    })
}
