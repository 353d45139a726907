//! The supervised training loop: cross-entropy on paired weak/strong views,
//! momentum SGD, a plateau-driven learning-rate schedule and an EMA shadow.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, make_dual_batch, AugKind, AugPolicy, SampleKey};
use crate::data::{Dataset, NoisyDataset};
use crate::diagnostics::{model_sharpness, SharpnessSpec};
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::nn::{build_model, Mode, Model, ModelSpec};
use crate::schedule::{LrSchedule, LrScheduleSpec};
use crate::tensor::{argmax, sgd_step, Float, Precision, SgdState, Tape, Targets};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaSpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_ema_momentum")]
    pub momentum: f64,
    /// Optimizer steps between EMA updates.
    #[serde(default = "default_one")]
    pub every_steps: u64,
}

impl Default for EmaSpec {
    fn default() -> Self {
        EmaSpec {
            enabled: true,
            momentum: default_ema_momentum(),
            every_steps: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_sgd_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            momentum: default_sgd_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Sharpness proxy recorded every `every` epochs when set.
    #[serde(default)]
    pub sharpness: Option<SharpnessSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    #[serde(default = "AugPolicy::weak")]
    pub weak: AugPolicy,
    #[serde(default = "AugPolicy::strong")]
    pub strong: AugPolicy,
    pub schedule: LrScheduleSpec,
    #[serde(default)]
    pub ema: EmaSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    /// Views per step. With augmentation this is `N` weak plus `N` strong
    /// views of `N = batch_size / 2` samples.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

fn default_true() -> bool {
    true
}
fn default_one() -> u64 {
    1
}
fn default_ema_momentum() -> f64 {
    0.999
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    200
}
fn default_eval_batch() -> usize {
    500
}

impl TrainConfig {
    /// Defaults of the recipe around the given model and schedule.
    pub fn new(model: ModelSpec, schedule: LrScheduleSpec) -> Self {
        TrainConfig {
            model,
            weak: AugPolicy::weak(),
            strong: AugPolicy::strong(),
            schedule,
            ema: EmaSpec::default(),
            optimizer: OptimizerSpec::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            precision: Precision::F32,
            eval_batch_size: default_eval_batch(),
            diagnostics: DiagnosticsSpec::default(),
        }
    }

    /// Two views per sample unless both policies are `none`; without
    /// augmentation the two views would be identical, so one is used.
    pub fn dual_view(&self) -> bool {
        !(self.weak.kind == AugKind::None && self.strong.kind == AugKind::None)
    }

    /// Distinct samples per step.
    pub fn samples_per_step(&self) -> usize {
        self.batch_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.weak.validate(self.model.input_shape)?;
        self.strong.validate(self.model.input_shape)?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size {} must be even and >= 2", self.batch_size)));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema.momentum) || self.ema.every_steps == 0 {
            return Err(Error::Config(format!(
                "ema momentum {} / every_steps {}",
                self.ema.momentum, self.ema.every_steps
            )));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config(format!("optimizer {:?}", self.optimizer)));
        }
        if let Some(s) = &self.diagnostics.sharpness {
            s.validate()?;
        }
        Ok(())
    }
}

/// One line of the metrics log.
///
/// `acc_test_ema` is the accuracy of the evaluation model: the EMA shadow when
/// EMA is enabled, otherwise the online model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_all: f64,
    pub loss_clean: Option<f64>,
    pub loss_noisy: Option<f64>,
    pub acc_train: f64,
    pub acc_test_online: f64,
    pub acc_test_ema: f64,
    pub plateau: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_unsupervised: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness_proxy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(MetricsLog { records })
    }
}

/// Hooks into a running loop. All methods default to doing nothing.
pub trait TrainObserver<T: Float> {
    fn on_epoch(&mut self, _record: &EpochRecord, _seconds: f64) -> Result<()> {
        Ok(())
    }

    /// Called on the epoch where the plateau detector fires.
    fn on_trigger(&mut self, _epoch: usize, _online: &Model<T>, _ema: Option<&EmaState<T>>) -> Result<()> {
        Ok(())
    }
}

/// An observer that ignores everything.
pub struct NoObserver;

impl<T: Float> TrainObserver<T> for NoObserver {}

/// Streams records as JSON lines to any writer.
pub struct JsonlObserver<W: Write> {
    pub writer: W,
}

impl<T: Float, W: Write> TrainObserver<T> for JsonlObserver<W> {
    fn on_epoch(&mut self, record: &EpochRecord, _seconds: f64) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer
            .write_all(b"\n")
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::io("<metrics stream>", e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy under eval semantics.
pub fn evaluate<T: Float>(model: &Model<T>, test: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate", "empty test set"));
    }
    let mut eval = model.clone();
    eval.set_mode(Mode::Eval);
    let k = test.num_classes;
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = to_float::<T>(&test.images.gather(chunk));
        let logits = eval.predict(&x, chunk.len())?;
        for (row, &i) in logits.chunks_exact(k).zip(chunk) {
            let y = test.labels[i];
            correct += (argmax(row) == y) as usize;
            loss += row_loss(row, y);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        mean_loss: loss / test.len() as f64,
    })
}

pub(crate) fn to_float<T: Float>(pixels: &[f32]) -> Vec<T> {
    pixels.iter().map(|&p| T::from_f64_lossy(p as f64)).collect()
}

/// `logsumexp(z) - z_y` in f64.
pub(crate) fn row_loss<T: Float>(row: &[T], y: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    lse - row[y].as_f64()
}

/// Running sums for one epoch of training views.
#[derive(Clone, Debug, Default)]
pub(crate) struct EpochTally {
    loss: [f64; 2],
    count: [usize; 2],
    correct: usize,
}

impl EpochTally {
    pub fn add(&mut self, loss: f64, noisy: bool, correct: bool) {
        self.loss[noisy as usize] += loss;
        self.count[noisy as usize] += 1;
        self.correct += correct as usize;
    }

    pub fn total(&self) -> usize {
        self.count[0] + self.count[1]
    }

    pub fn loss_all(&self) -> f64 {
        (self.loss[0] + self.loss[1]) / self.total().max(1) as f64
    }

    fn subset(&self, i: usize) -> Option<f64> {
        (self.count[i] > 0).then(|| self.loss[i] / self.count[i] as f64)
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total().max(1) as f64
    }

    /// Clean/noisy losses are reported only when the mask is known.
    pub fn summary(&self, mask_known: bool) -> EpochSummary {
        EpochSummary {
            loss_all: self.loss_all(),
            loss_clean: if mask_known { self.subset(0) } else { None },
            loss_noisy: if mask_known { self.subset(1) } else { None },
            acc_train: self.accuracy(),
        }
    }
}

/// Training-side numbers of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct EpochSummary {
    pub loss_all: f64,
    pub loss_clean: Option<f64>,
    pub loss_noisy: Option<f64>,
    pub acc_train: f64,
}

/// Result of a finished run.
pub struct RunOutput<T> {
    pub model: Model<T>,
    pub ema: Option<EmaState<T>>,
    pub log: MetricsLog,
    /// First epoch trained at the decayed rate, if the plateau fired.
    pub trigger_epoch: Option<usize>,
    pub epoch_seconds: Vec<f64>,
}

impl<T: Float> RunOutput<T> {
    /// The model used for reporting: the EMA shadow when present.
    pub fn eval_model(&self) -> Result<Model<T>> {
        match &self.ema {
            Some(e) => e.ema_model(),
            None => {
                let mut m = self.model.clone();
                m.set_mode(Mode::Eval);
                Ok(m)
            }
        }
    }
}

/// Mutable state of one training run, shared by the supervised and the
/// semi-supervised loops.
pub struct Trainer<'d, T: Float> {
    pub config: TrainConfig,
    pub train: &'d NoisyDataset,
    pub test: &'d Dataset,
    pub model: Model<T>,
    pub ema: Option<EmaState<T>>,
    pub(crate) sgd: SgdState<T>,
    pub(crate) schedule: LrSchedule,
    /// Epoch at which `schedule` starts counting.
    pub(crate) schedule_offset: usize,
    pub(crate) steps: u64,
    pub log: MetricsLog,
    pub epoch_seconds: Vec<f64>,
}

impl<'d, T: Float> Trainer<'d, T> {
    pub fn new(config: TrainConfig, train: &'d NoisyDataset, test: &'d Dataset) -> Result<Self> {
        config.validate()?;
        if T::PRECISION != config.precision {
            return Err(Error::Config(format!(
                "config asks for {:?} but the trainer was instantiated with {:?}",
                config.precision,
                T::PRECISION
            )));
        }
        let shape = config.model.input_shape;
        if train.images.shape() != shape || test.images.shape() != shape {
            return Err(Error::Config(format!(
                "model input {:?} vs data {:?} / {:?}",
                shape,
                train.images.shape(),
                test.images.shape()
            )));
        }
        if train.num_classes != config.model.num_classes || test.num_classes != config.model.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes, data has {}",
                config.model.num_classes, train.num_classes
            )));
        }
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model: Model<T> = build_model(&config.model, &mut rng)?;
        let ema = if config.ema.enabled {
            Some(EmaState::from_model(&model, config.ema.momentum)?)
        } else {
            None
        };
        let sgd = SgdState::new(
            config.schedule.initial_lr,
            config.optimizer.momentum,
            config.optimizer.weight_decay,
        )?;
        let schedule = LrSchedule::new(config.schedule)?;
        Ok(Trainer {
            config,
            train,
            test,
            model,
            ema,
            sgd,
            schedule,
            schedule_offset: 0,
            steps: 0,
            log: MetricsLog::default(),
            epoch_seconds: Vec::new(),
        })
    }

    pub fn trigger_epoch(&self) -> Option<usize> {
        self.schedule.trigger_epoch().map(|e| e + self.schedule_offset)
    }

    pub(crate) fn current_lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch - self.schedule_offset)
    }

    /// Seeded permutation of the training indices for `epoch`.
    pub(crate) fn epoch_order(&self, epoch: usize, n: usize, stream: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = SampleKey::new(self.config.seed, epoch as u64, u64::MAX, stream).rng();
        order.shuffle(&mut rng);
        order
    }

    /// Clears gradients, applies the recorded gradients with SGD, folds in
    /// batchnorm statistics and advances the EMA.
    pub(crate) fn apply_step(&mut self, tape: &Tape<T>, pass: &crate::nn::ForwardPass<T>) -> Result<()> {
        self.model.zero_grads();
        self.model.accumulate_grads(tape, pass);
        sgd_step(self.model.params_mut(), &mut self.sgd)?;
        self.model.absorb_batch_stats(pass);
        self.steps += 1;
        if let Some(ema) = &mut self.ema {
            if self.steps % self.config.ema.every_steps == 0 {
                ema.update(&self.model)?;
            }
        }
        Ok(())
    }

    /// One epoch of supervised training on the given sample indices (with
    /// multiplicity) and labels.
    pub(crate) fn supervised_epoch(&mut self, epoch: usize, indices: &[usize], labels: &[usize]) -> Result<EpochTally> {
        let images = std::sync::Arc::clone(&self.train.images);
        let [c, h, w] = images.shape();
        let k = self.config.model.num_classes;
        let per_step = self.config.samples_per_step();
        let mask = self.train.corruption_mask.clone();
        let mut tally = EpochTally::default();
        self.model.set_mode(Mode::Train);
        self.sgd.learning_rate = self.current_lr(epoch);
        for (step, chunk) in indices.chunks(per_step).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (pixels, batch_labels, batch_idx) = if self.config.dual_view() {
                let b = make_dual_batch(
                    &images,
                    chunk,
                    labels,
                    self.config.seed,
                    epoch as u64,
                    &self.config.weak,
                    &self.config.strong,
                )?;
                (b.pixels, b.labels, b.indices)
            } else {
                let px = augment_batch(&images, chunk, self.config.seed, epoch as u64, 0, &self.config.weak);
                (px, chunk.iter().map(|&i| labels[i]).collect(), chunk.to_vec())
            };
            let views = batch_labels.len();
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![views, c, h, w], to_float(&pixels), false)?;
            let pass = self.model.forward(&mut tape, x, false)?;
            let loss = tape.softmax_cross_entropy(pass.logits, Targets::Indices(&batch_labels))?;
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            tape.backward(loss)?;
            for ((row, &y), &i) in tape.value(pass.logits).chunks_exact(k).zip(&batch_labels).zip(&batch_idx) {
                let noisy = mask.as_ref().is_some_and(|m| m[i]);
                tally.add(row_loss(row, y), noisy, argmax(row) == y);
            }
            self.apply_step(&tape, &pass)?;
        }
        Ok(tally)
    }

    /// Evaluates, feeds the schedule, runs diagnostics and appends the record.
    pub(crate) fn finish_epoch(
        &mut self,
        epoch: usize,
        summary: EpochSummary,
        started: Instant,
        observer: &mut dyn TrainObserver<T>,
        extra: impl FnOnce(&mut EpochRecord),
    ) -> Result<()> {
        let lr = self.sgd.learning_rate;
        let online = evaluate(&self.model, self.test, self.config.eval_batch_size)?;
        let acc_test_ema = match &self.ema {
            Some(e) => evaluate(&e.ema_model()?, self.test, self.config.eval_batch_size)?.accuracy,
            None => online.accuracy,
        };
        let loss_all = summary.loss_all;
        let plateau = self.schedule.observe(epoch - self.schedule_offset, loss_all)?;
        let sharpness_proxy = match &self.config.diagnostics.sharpness {
            Some(s) if epoch % s.every.max(1) == 0 => {
                let mut rng = SampleKey::new(self.config.seed, epoch as u64, u64::MAX - 1, 0).rng();
                Some(model_sharpness(&self.model, &self.train.observed(), s, &mut rng)?)
            }
            _ => None,
        };
        let mut record = EpochRecord {
            epoch,
            lr,
            loss_all,
            loss_clean: summary.loss_clean,
            loss_noisy: summary.loss_noisy,
            acc_train: summary.acc_train,
            acc_test_online: online.accuracy,
            acc_test_ema,
            plateau,
            split_size: None,
            split_precision: None,
            lambda_u: None,
            loss_unsupervised: None,
            sharpness_proxy,
        };
        extra(&mut record);
        if plateau {
            observer.on_trigger(epoch, &self.model, self.ema.as_ref())?;
        }
        let seconds = started.elapsed().as_secs_f64();
        observer.on_epoch(&record, seconds)?;
        self.log.records.push(record);
        self.epoch_seconds.push(seconds);
        Ok(())
    }

    /// One RegCE epoch over the whole training set.
    pub fn run_epoch(&mut self, epoch: usize, observer: &mut dyn TrainObserver<T>) -> Result<()> {
        let started = Instant::now();
        let order = self.epoch_order(epoch, self.train.len(), 0);
        let labels = self.train.noisy_labels.clone();
        let tally = self.supervised_epoch(epoch, &order, &labels)?;
        let summary = tally.summary(self.train.corruption_mask.is_some());
        self.finish_epoch(epoch, summary, started, observer, |_| {})
    }

    pub fn into_output(mut self) -> RunOutput<T> {
        self.model.set_mode(Mode::Eval);
        self.model.zero_grads();
        RunOutput {
            trigger_epoch: self.trigger_epoch(),
            model: self.model,
            ema: self.ema,
            log: self.log,
            epoch_seconds: self.epoch_seconds,
        }
    }
}

/// Runs the full supervised recipe for `config.epochs` epochs.
pub fn run_regce<T: Float>(
    config: &TrainConfig,
    train: &NoisyDataset,
    test: &Dataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<RunOutput<T>> {
    if train.corruption_mask.is_none() {
        log::warn!("training labels carry no corruption mask; clean/noisy losses are omitted");
    }
    let mut trainer = Trainer::<T>::new(config.clone(), train, test)?;
    for epoch in 0..config.epochs {
        trainer.run_epoch(epoch, observer)?;
    }
    Ok(trainer.into_output())
}
