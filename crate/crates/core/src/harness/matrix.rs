use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_noise, run_into_dir, ExperimentConfig};
use crate::augment::AugPolicy;
use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::schedule::LrKind;

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn on_only() -> Vec<bool> {
    vec![true]
}

fn off_only() -> Vec<bool> {
    vec![false]
}

fn default_lr_off() -> LrKind {
    LrKind::Constant
}

/// Component toggles. Each list holds the settings to sweep; `[false, true]`
/// on all three gives the full 8-cell ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxes {
    #[serde(default = "on_only")]
    pub lr: Vec<bool>,
    #[serde(default = "on_only")]
    pub aug: Vec<bool>,
    #[serde(default = "on_only")]
    pub ema: Vec<bool>,
    /// Schedule used when the sharp decay is switched off.
    #[serde(default = "default_lr_off")]
    pub lr_off: LrKind,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            lr: on_only(),
            aug: on_only(),
            ema: on_only(),
            lr_off: default_lr_off(),
        }
    }
}

impl AblationAxes {
    pub fn full() -> Self {
        AblationAxes {
            lr: vec![false, true],
            aug: vec![false, true],
            ema: vec![false, true],
            ..Self::default()
        }
    }
}

/// Axes of an experiment matrix. Empty noise lists fall back to the
/// config's own noise section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    #[serde(default)]
    pub noise_kinds: Vec<NoiseKind>,
    #[serde(default)]
    pub noise_rates: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: AblationAxes,
    #[serde(default = "off_only")]
    pub semi: Vec<bool>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec {
            noise_kinds: Vec::new(),
            noise_rates: Vec::new(),
            seeds: default_seeds(),
            ablation: AblationAxes::default(),
            semi: off_only(),
        }
    }
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        let a = &self.ablation;
        if self.seeds.is_empty() || a.lr.is_empty() || a.aug.is_empty() || a.ema.is_empty() || self.semi.is_empty() {
            return Err(Error::Config("matrix axes must not be empty".into()));
        }
        if a.lr_off == LrKind::Sharp {
            return Err(Error::Config("matrix.ablation.lr_off must not be `sharp`".into()));
        }
        if let Some(r) = self.noise_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("matrix noise rate {r} outside [0, 1]")));
        }
        Ok(())
    }
}

/// One run of a matrix: a cell (axis values) and a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub cell: String,
    pub seed: u64,
    pub noise: Option<NoiseSpec>,
    pub lr_on: bool,
    pub aug_on: bool,
    pub ema_on: bool,
    pub semi_on: bool,
    pub config: ExperimentConfig,
}

impl RunPlan {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.cell).join(format!("seed{}", self.seed))
    }
}

fn cell_name(noise: Option<&NoiseSpec>, lr: bool, aug: bool, ema: bool, semi: bool) -> String {
    let noise = match noise {
        Some(n) => format!("{}_{}", n.kind.as_str(), n.rate),
        None => "clean".to_string(),
    };
    let b = |x: bool| if x { "on" } else { "off" };
    format!("{noise}-lr_{}-aug_{}-ema_{}-semi_{}", b(lr), b(aug), b(ema), b(semi))
}

/// Expands the axes into runs, cell-major with seeds innermost. The resolved
/// configs carry no matrix section.
pub fn expand_matrix(base: &ExperimentConfig) -> Result<Vec<RunPlan>> {
    let spec = base.matrix.clone().unwrap_or_default();
    spec.validate()?;
    let mut noises: Vec<Option<NoiseSpec>> = Vec::new();
    match (&base.noise, spec.noise_kinds.is_empty(), spec.noise_rates.is_empty()) {
        (base_noise, true, true) => noises.push(*base_noise),
        (base_noise, _, _) => {
            let seed = base_noise.map_or(0, |n| n.seed);
            let kinds = if spec.noise_kinds.is_empty() {
                vec![base_noise.map_or(NoiseKind::Symmetric, |n| n.kind)]
            } else {
                spec.noise_kinds.clone()
            };
            let rates = if spec.noise_rates.is_empty() {
                vec![base_noise.map_or(0.0, |n| n.rate)]
            } else {
                spec.noise_rates.clone()
            };
            for &kind in &kinds {
                for &rate in &rates {
                    noises.push(Some(NoiseSpec { kind, rate, seed }));
                }
            }
        }
    }

    let mut plans = Vec::new();
    for noise in &noises {
        for &lr in &spec.ablation.lr {
            for &aug in &spec.ablation.aug {
                for &ema in &spec.ablation.ema {
                    for &semi in &spec.semi {
                        if semi && base.mixmatch.is_none() {
                            return Err(Error::Config("matrix.semi includes true but no `mixmatch` section".into()));
                        }
                        let cell = cell_name(noise.as_ref(), lr, aug, ema, semi);
                        for &seed in &spec.seeds {
                            let mut cfg = base.clone();
                            cfg.matrix = None;
                            cfg.noise = *noise;
                            if !lr {
                                cfg.train.schedule.kind = spec.ablation.lr_off;
                            }
                            if !aug {
                                cfg.train.weak = AugPolicy::none();
                                cfg.train.strong = AugPolicy::none();
                            }
                            if !ema {
                                cfg.train.ema.enabled = false;
                            }
                            if !semi {
                                cfg.mixmatch = None;
                            }
                            let config = cfg.with_seed(seed);
                            config.validate()?;
                            plans.push(RunPlan {
                                cell: cell.clone(),
                                seed,
                                noise: *noise,
                                lr_on: lr,
                                aug_on: aug,
                                ema_on: ema,
                                semi_on: semi,
                                config,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(plans)
}

/// Outcome of a single matrix run; failures keep their message.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub plan: RunPlan,
    pub dir: PathBuf,
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub noise_kind: String,
    pub noise_rate: f64,
    pub lr_on: bool,
    pub aug_on: bool,
    pub ema_on: bool,
    pub semi_on: bool,
    pub seed_count: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Groups results by cell in first-seen order. `acc_std` is the sample
/// standard deviation (0 for a single seed); failed seeds are not counted.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, Vec<f64>)> = Vec::new();
    for r in results {
        let pos = match rows.iter().position(|(row, _)| row.run_id == r.plan.cell) {
            Some(p) => p,
            None => {
                let p = &r.plan;
                rows.push((
                    SummaryRow {
                        run_id: p.cell.clone(),
                        noise_kind: p.noise.map_or("none", |n| n.kind.as_str()).to_string(),
                        noise_rate: p.noise.map_or(0.0, |n| n.rate),
                        lr_on: p.lr_on,
                        aug_on: p.aug_on,
                        ema_on: p.ema_on,
                        semi_on: p.semi_on,
                        seed_count: 0,
                        acc_mean: f64::NAN,
                        acc_std: f64::NAN,
                    },
                    Vec::new(),
                ));
                rows.len() - 1
            }
        };
        if let Ok(acc) = r.outcome {
            rows[pos].1.push(acc);
        }
    }
    rows.into_iter()
        .map(|(mut row, accs)| {
            let n = accs.len();
            row.seed_count = n;
            if n > 0 {
                let mean = accs.iter().sum::<f64>() / n as f64;
                row.acc_mean = mean;
                row.acc_std = if n > 1 {
                    (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
            }
            row
        })
        .collect()
}

/// Runs every combination of the matrix axes under `root`, at most
/// `threads` at a time, and writes `summary.csv`. A failed run leaves an
/// `error.txt` in its directory and does not stop the others.
pub fn run_experiment_matrix(base: &ExperimentConfig, root: &Path, threads: usize) -> Result<(Vec<CellResult>, Vec<SummaryRow>)> {
    use rayon::prelude::*;

    let plans = expand_matrix(base)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let (train, test) = base.dataset.load()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let results: Vec<CellResult> = pool.install(|| {
        plans
            .into_par_iter()
            .map(|plan| {
                let dir = plan.dir(root);
                let run = apply_noise(&train, plan.config.noise.as_ref())
                    .and_then(|noisy| run_into_dir(&plan.config, &noisy, &test, &dir, plan.semi_on));
                let outcome = match run {
                    Ok(s) => {
                        log::info!("{} seed {}: final accuracy {:.4}", plan.cell, plan.seed, s.final_accuracy);
                        Ok(s.final_accuracy)
                    }
                    Err(e) => {
                        log::warn!("{} seed {} failed: {e}", plan.cell, plan.seed);
                        let _ = std::fs::create_dir_all(&dir);
                        let _ = std::fs::write(dir.join(super::files::ERROR), e.to_string());
                        Err(e.to_string())
                    }
                };
                CellResult { plan, dir, outcome }
            })
            .collect()
    });

    let summary = summarize(&results);
    let path = root.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in &summary {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((results, summary))
}
