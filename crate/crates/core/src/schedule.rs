//! Learning-rate schedules and the plateau detector that drives the sharp one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    Constant,
    Cosine,
    Step,
    Sharp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSpec {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_rel")]
    pub min_relative_improvement: f64,
    /// Forces the trigger at this epoch if the loss has not plateaued by then.
    #[serde(default)]
    pub max_trigger_epoch: Option<usize>,
}

fn default_patience() -> usize {
    10
}
fn default_min_rel() -> f64 {
    1e-3
}

impl Default for PlateauSpec {
    fn default() -> Self {
        PlateauSpec {
            patience: default_patience(),
            min_relative_improvement: default_min_rel(),
            max_trigger_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrScheduleSpec {
    pub kind: LrKind,
    #[serde(default = "default_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default = "default_gap")]
    pub second_decay_gap: usize,
    #[serde(default)]
    pub plateau: PlateauSpec,
    pub total_epochs: usize,
    /// Epochs between drops of the step schedule.
    #[serde(default = "default_step_size")]
    pub step_size: usize,
    #[serde(default = "default_step_gamma")]
    pub step_gamma: f64,
}

fn default_lr() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.01
}
fn default_gap() -> usize {
    20
}
fn default_step_size() -> usize {
    60
}
fn default_step_gamma() -> f64 {
    0.1
}

impl LrScheduleSpec {
    pub fn new(kind: LrKind, total_epochs: usize) -> Self {
        LrScheduleSpec {
            kind,
            initial_lr: default_lr(),
            decay_factor: default_decay(),
            second_decay_gap: default_gap(),
            plateau: PlateauSpec::default(),
            total_epochs,
            step_size: default_step_size(),
            step_gamma: default_step_gamma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("lr_schedule", msg));
        // Zero is allowed: it freezes the parameters, which tests rely on.
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be non-negative", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor {} outside (0, 1)", self.decay_factor));
        }
        if self.second_decay_gap < 1 {
            return bad("second_decay_gap must be at least 1".into());
        }
        if self.plateau.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.step_size < 1 || !(self.step_gamma > 0.0 && self.step_gamma <= 1.0) {
            return bad(format!("step schedule size {} gamma {}", self.step_size, self.step_gamma));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`.
///
/// `trigger` is the first epoch trained with the decayed rate (the epoch after
/// the plateau was detected); it only matters for the sharp schedule.
pub fn lr_at(spec: &LrScheduleSpec, trigger: Option<usize>, epoch: usize) -> f64 {
    let lr0 = spec.initial_lr;
    match spec.kind {
        LrKind::Constant => lr0,
        LrKind::Cosine => {
            let t = epoch as f64 / spec.total_epochs.max(1) as f64;
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
        LrKind::Step => lr0 * spec.step_gamma.powi((epoch / spec.step_size) as i32),
        LrKind::Sharp => match trigger {
            Some(t) if epoch >= t + spec.second_decay_gap => lr0 * spec.decay_factor * spec.decay_factor,
            Some(t) if epoch >= t => lr0 * spec.decay_factor,
            _ => lr0,
        },
    }
}

/// Patience-based plateau detection on the epoch training loss.
///
/// An epoch improves on the best loss only if it lowers it by more than the
/// relative threshold. The detector fires once, on the epoch where the count
/// of consecutive non-improving epochs reaches `patience`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauDetector {
    spec: PlateauSpec,
    best: f64,
    stagnant: usize,
    fired_at: Option<usize>,
}

impl PlateauDetector {
    pub fn new(spec: PlateauSpec) -> Self {
        PlateauDetector {
            spec,
            best: f64::INFINITY,
            stagnant: 0,
            fired_at: None,
        }
    }

    pub fn fired_at(&self) -> Option<usize> {
        self.fired_at
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds the loss of `epoch`; returns true on the (single) firing epoch.
    pub fn update(&mut self, epoch: usize, loss: f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        if self.fired_at.is_some() {
            return Ok(false);
        }
        if loss < self.best * (1.0 - self.spec.min_relative_improvement) {
            self.best = loss;
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        let forced = self.spec.max_trigger_epoch.is_some_and(|cap| epoch >= cap);
        if self.stagnant >= self.spec.patience || forced {
            self.fired_at = Some(epoch);
            return Ok(true);
        }
        Ok(false)
    }
}

/// A schedule together with the detector state it depends on.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub spec: LrScheduleSpec,
    detector: PlateauDetector,
}

impl LrSchedule {
    pub fn new(spec: LrScheduleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(LrSchedule {
            detector: PlateauDetector::new(spec.plateau),
            spec,
        })
    }

    /// First epoch run at the decayed rate, once the plateau has been seen.
    pub fn trigger_epoch(&self) -> Option<usize> {
        self.detector.fired_at().map(|e| e + 1)
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(&self.spec, self.trigger_epoch(), epoch)
    }

    /// Records the epoch loss; returns whether the plateau fired this epoch.
    /// Only the sharp schedule consults the detector.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        if self.spec.kind != LrKind::Sharp {
            return Ok(false);
        }
        self.detector.update(epoch, loss)
    }
}
