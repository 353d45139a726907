//! Confident-sample split and MixMatch fine-tuning on top of a RegCE warmup.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, mixup, AugPolicy, SampleKey};
use crate::data::{Dataset, ImageSet, NoisyDataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::schedule::{LrKind, LrSchedule, LrScheduleSpec};
use crate::tensor::{argmax, softmax_rows, Float, Tape, Targets};
use crate::train::{to_float, EpochSummary, RunOutput, TrainConfig, TrainObserver, Trainer};

// View tags of the augmentation streams; 0 and 1 belong to the RegCE dual batch.
const SPLIT_VIEWS: [u64; 2] = [2, 3];
const LABELED_VIEW: u64 = 4;
const UNLABELED_VIEW0: u64 = 5;
// Stream ids for the per-epoch shuffles.
const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const MIX_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixMatchSpec {
    /// Augmented views per unlabeled sample.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    /// Share of the SSL epochs over which `lambda_u` ramps up from 0.
    #[serde(default = "default_ramp")]
    pub ramp_fraction: f64,
    #[serde(default = "default_ssl_epochs")]
    pub ssl_epochs: usize,
    /// Learning-rate schedule of the SSL phase, counted from its first epoch.
    pub ssl_schedule: LrScheduleSpec,
    /// SSL epochs between recomputations of the split.
    #[serde(default = "default_split_every")]
    pub split_every: usize,
    /// Augmentation of the two views that decide the split.
    #[serde(default = "AugPolicy::weak")]
    pub split_view: AugPolicy,
    /// Augmentation of labeled samples and of the unlabeled guessing views.
    #[serde(default = "AugPolicy::weak")]
    pub train_view: AugPolicy,
}

fn default_k() -> usize {
    2
}
fn default_temperature() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.75
}
fn default_lambda_u() -> f64 {
    75.0
}
fn default_ramp() -> f64 {
    1.0 / 3.0
}
fn default_ssl_epochs() -> usize {
    200
}
fn default_split_every() -> usize {
    1
}

impl MixMatchSpec {
    pub fn new(ssl_epochs: usize) -> Self {
        let mut ssl_schedule = LrScheduleSpec::new(LrKind::Constant, ssl_epochs);
        ssl_schedule.initial_lr = 0.02;
        MixMatchSpec {
            k: default_k(),
            temperature: default_temperature(),
            alpha: default_alpha(),
            lambda_u: default_lambda_u(),
            ramp_fraction: default_ramp(),
            ssl_epochs,
            ssl_schedule,
            split_every: default_split_every(),
            split_view: AugPolicy::weak(),
            train_view: AugPolicy::weak(),
        }
    }

    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("mixmatch: {msg}")));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be positive", self.alpha));
        }
        if !(self.lambda_u >= 0.0) {
            return bad(format!("lambda_u {} must be non-negative", self.lambda_u));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return bad(format!("ramp_fraction {} outside [0, 1]", self.ramp_fraction));
        }
        if self.split_every == 0 {
            return bad("split_every must be >= 1".into());
        }
        self.ssl_schedule.validate()?;
        self.split_view.validate(shape)?;
        self.train_view.validate(shape)
    }

    /// Unlabeled weight after `t` SSL epochs (fractional), ramping linearly.
    pub fn lambda_u_at(&self, t: f64) -> f64 {
        let span = self.ramp_fraction * self.ssl_epochs as f64;
        if span <= 0.0 {
            return self.lambda_u;
        }
        self.lambda_u * (t / span).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Predicted class of each sample under the two views.
    pub predictions: [Vec<usize>; 2],
    /// Share of labeled samples whose observed label is correct; `None` if
    /// the ground truth is unknown or nothing was labeled.
    pub precision: Option<f64>,
}

/// Marks a sample labeled when both weakly augmented views are classified as
/// its observed label.
pub fn confident_split<T: Float>(
    model: &Model<T>,
    ds: &NoisyDataset,
    seed: u64,
    epoch: u64,
    view: &AugPolicy,
    batch_size: usize,
) -> Result<SplitResult> {
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let k = ds.num_classes;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut predictions = [Vec::with_capacity(ds.len()), Vec::with_capacity(ds.len())];
    for chunk in all.chunks(batch_size.max(1)) {
        for (v, preds) in predictions.iter_mut().enumerate() {
            let x = to_float::<T>(&augment_batch(&ds.images, chunk, seed, epoch, SPLIT_VIEWS[v], view));
            let logits = eval.predict(&x, chunk.len())?;
            preds.extend(logits.chunks_exact(k).map(argmax));
        }
    }
    let (labeled, unlabeled): (Vec<usize>, Vec<usize>) = all
        .iter()
        .partition(|&&i| predictions[0][i] == ds.noisy_labels[i] && predictions[1][i] == ds.noisy_labels[i]);
    let precision = match (&ds.true_labels, labeled.is_empty()) {
        (Some(truth), false) => {
            Some(labeled.iter().filter(|&&i| truth[i] == ds.noisy_labels[i]).count() as f64 / labeled.len() as f64)
        }
        _ => None,
    };
    Ok(SplitResult {
        labeled,
        unlabeled,
        predictions,
        precision,
    })
}

/// Draws `target` indices so that every class present in `indices` gets
/// `floor(target / Kr)` or `ceil(target / Kr)` draws (with replacement
/// within the class). Which classes receive the extra draw is random.
pub fn class_balanced_resample<R: Rng>(indices: &[usize], labels: &[usize], target: usize, rng: &mut R) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Err(Error::invalid("class_balanced_resample", "no indices to resample"));
    }
    let max_label = indices.iter().map(|&i| labels[i]).max().expect("nonempty");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let mut classes: Vec<&Vec<usize>> = by_class.iter().filter(|c| !c.is_empty()).collect();
    let kr = classes.len();
    classes.shuffle(rng);
    let mut out = Vec::with_capacity(target);
    for (j, members) in classes.iter().enumerate() {
        let draws = target / kr + usize::from(j < target % kr);
        out.extend((0..draws).map(|_| members[rng.gen_range(0..members.len())]));
    }
    out.shuffle(rng);
    Ok(out)
}

/// `q_i = p_i^(1/T) / sum_j p_j^(1/T)`.
pub fn sharpen(p: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("sharpen", format!("temperature {temperature} must be positive")));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || p.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("sharpen", format!("not a probability row: {p:?}")));
    }
    // Work in log space so small temperatures do not underflow to 0/0.
    let logs: Vec<f64> = p.iter().map(|&v| v.ln() / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Averages the softmax of several views' logits (each `n x k`) and
/// sharpens every row.
pub fn guess_from_logits<T: Float>(views: &[Vec<T>], k: usize, temperature: f64) -> Result<Vec<f64>> {
    let first = views.first().ok_or_else(|| Error::invalid("guess_labels", "need at least one view"))?;
    let mut mean = vec![0.0f64; first.len()];
    for v in views {
        if v.len() != first.len() {
            return Err(Error::ShapeMismatch {
                op: "guess_labels",
                lhs: vec![first.len()],
                rhs: vec![v.len()],
            });
        }
        for (m, p) in mean.iter_mut().zip(softmax_rows(v, k)) {
            *m += p.as_f64() / views.len() as f64;
        }
    }
    let mut out = Vec::with_capacity(mean.len());
    for row in mean.chunks_exact(k) {
        out.extend(sharpen(row, temperature)?);
    }
    Ok(out)
}

/// Sharpened average prediction over `k_views` augmentations of each sample
/// (eval semantics). Returns the augmented views too, `k_views` blocks of
/// `indices.len()` images.
#[allow(clippy::too_many_arguments)]
pub fn guess_labels<T: Float>(
    model: &Model<T>,
    images: &ImageSet,
    indices: &[usize],
    k_views: usize,
    temperature: f64,
    view: &AugPolicy,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<f64>, Vec<Vec<f32>>)> {
    let k = model.spec().num_classes;
    let mut pixels = Vec::with_capacity(k_views);
    let mut logits = Vec::with_capacity(k_views);
    for v in 0..k_views {
        let x = augment_batch(images, indices, seed, epoch, UNLABELED_VIEW0 + v as u64, view);
        logits.push(model.predict(&to_float::<T>(&x), indices.len())?);
        pixels.push(x);
    }
    Ok((guess_from_logits(&logits, k, temperature)?, pixels))
}

/// `lambda' = max(lambda, 1 - lambda)` with `lambda ~ Beta(alpha, alpha)`.
pub fn sample_mix_lambda<R: Rng>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid("mixmatch", e.to_string()))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// MixMatch mixing: the concatenation `W = [labeled; unlabeled]` is mixed
/// element-wise against `W[perm]` with weight `lambda` on the original.
pub fn mix_batches<T: Float>(x: &[T], p: &[T], perm: &[usize], lambda: T, image_len: usize, k: usize) -> Result<(Vec<T>, Vec<T>)> {
    let n = perm.len();
    if x.len() != n * image_len || p.len() != n * k {
        return Err(Error::ShapeMismatch {
            op: "mix_batches",
            lhs: vec![x.len(), p.len()],
            rhs: vec![n * image_len, n * k],
        });
    }
    let xb: Vec<T> = perm.iter().flat_map(|&j| x[j * image_len..(j + 1) * image_len].iter().copied()).collect();
    let pb: Vec<T> = perm.iter().flat_map(|&j| p[j * k..(j + 1) * k].iter().copied()).collect();
    mixup(x, p, &xb, &pb, lambda)
}

/// Losses of one MixMatch update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixMatchLosses {
    pub supervised: f64,
    pub unsupervised: f64,
    /// Mixed labeled rows whose prediction matches the target's argmax.
    pub labeled_correct: usize,
}

impl<'d, T: Float> Trainer<'d, T> {
    /// One MixMatch step on a labeled and an unlabeled batch; updates the model.
    pub fn mixmatch_step(
        &mut self,
        labeled: &[usize],
        unlabeled: &[usize],
        spec: &MixMatchSpec,
        lambda_u: f64,
        epoch: u64,
        step: u64,
    ) -> Result<MixMatchLosses> {
        if labeled.is_empty() {
            return Err(Error::invalid("mixmatch_step", "empty labeled batch"));
        }
        let images = std::sync::Arc::clone(&self.train.images);
        let [c, h, w] = images.shape();
        let image_len = images.image_len();
        let k = self.config.model.num_classes;
        let seed = self.config.seed;

        let mut x: Vec<T> = to_float(&augment_batch(&images, labeled, seed, epoch, LABELED_VIEW, &spec.train_view));
        let mut p: Vec<T> = vec![T::zero(); labeled.len() * k];
        for (row, &i) in p.chunks_exact_mut(k).zip(labeled) {
            row[self.train.noisy_labels[i]] = T::one();
        }
        if !unlabeled.is_empty() {
            let (q, views) = guess_labels(&self.model, &images, unlabeled, spec.k, spec.temperature, &spec.train_view, seed, epoch)?;
            let q: Vec<T> = q.iter().map(|&v| T::from_f64_lossy(v)).collect();
            for v in views {
                x.extend(to_float::<T>(&v));
                p.extend_from_slice(&q);
            }
        }
        let n = x.len() / image_len;
        let n_l = labeled.len();
        let mut rng = SampleKey::new(seed, epoch, step, MIX_STREAM).rng();
        let lambda = sample_mix_lambda(spec.alpha, &mut rng)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (xm, pm) = mix_batches(&x, &p, &perm, T::from_f64_lossy(lambda), image_len, k)?;

        self.model.set_mode(Mode::Train);
        let mut tape = Tape::new();
        let input = tape.leaf_from(vec![n, c, h, w], xm, false)?;
        let pass = self.model.forward(&mut tape, input, false)?;
        let logits_l = tape.narrow(pass.logits, 0, 0, n_l)?;
        let lx = tape.softmax_cross_entropy(logits_l, Targets::Probs(&pm[..n_l * k]))?;
        let (total, lu_value) = if n > n_l {
            let logits_u = tape.narrow(pass.logits, 0, n_l, n - n_l)?;
            let lu = tape.softmax_mse(logits_u, &pm[n_l * k..])?;
            let weighted = tape.scale(lu, T::from_f64_lossy(lambda_u));
            (tape.add(lx, weighted)?, tape.value(lu)[0].as_f64())
        } else {
            (lx, 0.0)
        };
        let lx_value = tape.value(lx)[0].as_f64();
        if !(lx_value.is_finite() && lu_value.is_finite()) {
            return Err(Error::NonFinite(format!("mixmatch loss at epoch {epoch}, step {step}")));
        }
        tape.backward(total)?;
        let labeled_correct = tape
            .value(logits_l)
            .chunks_exact(k)
            .zip(pm[..n_l * k].chunks_exact(k))
            .filter(|(z, t)| argmax(z) == argmax(t))
            .count();
        self.apply_step(&tape, &pass)?;
        Ok(MixMatchLosses {
            supervised: lx_value,
            unsupervised: lu_value,
            labeled_correct,
        })
    }
}

/// RegCE warmup for `config.epochs` epochs, then `mixmatch.ssl_epochs` of
/// MixMatch on the confident split. The EMA shadow is carried through.
pub fn run_regce_semi<T: Float>(
    config: &TrainConfig,
    mixmatch: &MixMatchSpec,
    train: &NoisyDataset,
    test: &Dataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<RunOutput<T>> {
    mixmatch.validate(config.model.input_shape)?;
    let mut trainer = Trainer::<T>::new(config.clone(), train, test)?;
    for epoch in 0..config.epochs {
        trainer.run_epoch(epoch, observer)?;
    }
    let warmup_trigger = trainer.trigger_epoch();
    trainer.schedule = LrSchedule::new(mixmatch.ssl_schedule)?;
    trainer.schedule_offset = config.epochs;
    let per_step = config.samples_per_step();
    let mut split: Option<SplitResult> = None;
    for s in 0..mixmatch.ssl_epochs {
        let epoch = config.epochs + s;
        let started = Instant::now();
        if s % mixmatch.split_every == 0 || split.is_none() {
            let judge = match &trainer.ema {
                Some(e) => e.ema_model()?,
                None => trainer.model.clone(),
            };
            split = Some(confident_split(
                &judge,
                train,
                config.seed,
                epoch as u64,
                &mixmatch.split_view,
                config.eval_batch_size,
            )?);
        }
        let sp = split.as_ref().expect("split computed");
        let lambda_u = mixmatch.lambda_u_at(s as f64);
        let (summary, lu_mean) = if sp.labeled.is_empty() {
            log::warn!("epoch {epoch}: confident split is empty, running a supervised epoch");
            let order = trainer.epoch_order(epoch, train.len(), 0);
            let labels = train.noisy_labels.clone();
            trainer.sgd.learning_rate = trainer.current_lr(epoch);
            let tally = trainer.supervised_epoch(epoch, &order, &labels)?;
            (tally.summary(train.corruption_mask.is_some()), None)
        } else {
            let mut rng = SampleKey::new(config.seed, epoch as u64, u64::MAX, LABELED_STREAM).rng();
            let labeled = class_balanced_resample(&sp.labeled, &train.noisy_labels, train.len(), &mut rng)?;
            let mut unl_rng = SampleKey::new(config.seed, epoch as u64, u64::MAX, UNLABELED_STREAM).rng();
            let mut unlabeled = sp.unlabeled.clone();
            unlabeled.shuffle(&mut unl_rng);
            trainer.sgd.learning_rate = trainer.current_lr(epoch);
            let steps = labeled.len().div_ceil(per_step);
            let (mut loss_sum, mut lu_sum, mut correct, mut rows) = (0.0, 0.0, 0usize, 0usize);
            for (step, chunk) in labeled.chunks(per_step).enumerate() {
                let t = s as f64 + step as f64 / steps as f64;
                let lam = mixmatch.lambda_u_at(t);
                let ub: Vec<usize> = if unlabeled.is_empty() {
                    Vec::new()
                } else {
                    (0..chunk.len()).map(|j| unlabeled[(step * per_step + j) % unlabeled.len()]).collect()
                };
                let l = trainer.mixmatch_step(chunk, &ub, mixmatch, lam, epoch as u64, step as u64)?;
                loss_sum += l.supervised + lam * l.unsupervised;
                lu_sum += l.unsupervised;
                correct += l.labeled_correct;
                rows += chunk.len();
            }
            let summary = EpochSummary {
                loss_all: loss_sum / steps as f64,
                loss_clean: None,
                loss_noisy: None,
                acc_train: correct as f64 / rows.max(1) as f64,
            };
            (summary, Some(lu_sum / steps as f64))
        };
        let (size, precision) = (sp.labeled.len(), sp.precision);
        trainer.finish_epoch(epoch, summary, started, observer, |r| {
            r.split_size = Some(size);
            r.split_precision = precision;
            r.lambda_u = Some(lambda_u);
            r.loss_unsupervised = lu_mean;
        })?;
    }
    let mut out = trainer.into_output();
    out.trigger_epoch = warmup_trigger;
    Ok(out)
}
