use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::files;
use crate::error::{Error, Result};

/// Figure series that can be exported from run directories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Schedules,
    Memorization,
    Sharpness,
    Generalization,
    AugmentCompare,
}

impl Figure {
    /// Metric columns copied per epoch, after `series` and `epoch`.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Figure::Schedules => &["lr"],
            Figure::Memorization => &["loss_clean", "loss_noisy"],
            Figure::Sharpness => &["sharpness_proxy"],
            Figure::Generalization => &["acc_train", "acc_test_online", "acc_test_ema"],
            Figure::AugmentCompare => &["acc_test_online", "acc_test_ema"],
        }
    }
}

impl std::str::FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown figure `{s}`")))
    }
}

fn series_name(dir: &Path) -> String {
    let mut parts: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    parts.reverse();
    // Matrix runs live in <cell>/seedN; keep the cell in the series name.
    if parts.len() == 2 && parts[1].starts_with("seed") {
        parts.join("/")
    } else {
        parts.pop().unwrap_or_default()
    }
}

/// Writes tidy CSV (`series, epoch, <figure columns>`), one row per epoch
/// per run. Epochs where a column is null (sharpness on off-epochs, clean/noisy
/// losses during SSL) are skipped; a run with no usable epoch is an error
/// naming the column.
pub fn write_figure_data<W: Write>(runs: &[PathBuf], figure: Figure, out: W) -> Result<usize> {
    let cols = figure.columns();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["series", "epoch"];
    header.extend_from_slice(cols);
    w.write_record(&header)?;
    let mut rows = 0;
    for dir in runs {
        let path = dir.join(files::METRICS);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let series = series_name(dir);
        let mut emitted = 0;
        let mut absent: Option<&str> = None;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
            let epoch = rec.get("epoch").and_then(|v| v.as_u64()).ok_or_else(|| Error::MissingColumn {
                column: "epoch".into(),
                path: path.clone(),
            })?;
            let values: Vec<Option<f64>> = cols.iter().map(|c| rec.get(*c).and_then(|v| v.as_f64())).collect();
            if let Some(i) = values.iter().position(Option::is_none) {
                absent.get_or_insert(cols[i]);
                continue;
            }
            let mut record = vec![series.clone(), epoch.to_string()];
            record.extend(values.iter().map(|v| v.unwrap().to_string()));
            w.write_record(&record)?;
            emitted += 1;
        }
        if emitted == 0 {
            return Err(Error::MissingColumn {
                column: absent.unwrap_or(cols[0]).to_string(),
                path,
            });
        }
        rows += emitted;
    }
    w.flush().map_err(|e| Error::io("<figure output>", e))?;
    Ok(rows)
}

/// File-writing wrapper around [`write_figure_data`]; returns the row count.
pub fn export_figure_data(runs: &[PathBuf], figure: Figure, out: &Path) -> Result<usize> {
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let rows = write_figure_data(runs, figure, std::io::BufWriter::new(file));
    if rows.is_err() {
        let _ = std::fs::remove_file(out);
    }
    rows
}
