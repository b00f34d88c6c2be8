//! Metrics CSV: one comment line with the accounting conventions, a header,
//! then one flushed row per logged step.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::flops::FLOPS_CONVENTION;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 13] = [
    "step",
    "epoch",
    "split",
    "loss",
    "perplexity_or_mse",
    "copy_baseline_score",
    "mean_first_step_energy",
    "mean_last_step_energy",
    "alpha",
    "grad_norm",
    "lr",
    "cumulative_flops",
    "wall_seconds",
];

pub const VALIDATION_CONVENTION: &str =
    "val loss=mean token-level CE (or SmoothL1) over all held-out positions";

/// One CSV record. `NaN` marks values that do not apply (for example energies
/// of the baseline). `loss` is the unweighted reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: f64,
    pub split: String,
    pub loss: f64,
    pub perplexity_or_mse: f64,
    pub copy_baseline_score: f64,
    pub mean_first_step_energy: f64,
    pub mean_last_step_energy: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub cumulative_flops: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn new(step: usize, split: &str) -> Self {
        Self {
            step,
            epoch: f64::NAN,
            split: split.into(),
            loss: f64::NAN,
            perplexity_or_mse: f64::NAN,
            copy_baseline_score: f64::NAN,
            mean_first_step_energy: f64::NAN,
            mean_last_step_energy: f64::NAN,
            alpha: f64::NAN,
            grad_norm: f64::NAN,
            lr: f64::NAN,
            cumulative_flops: 0.0,
            wall_seconds: 0.0,
        }
    }

    fn to_csv(&self) -> String {
        let nums = [
            self.loss,
            self.perplexity_or_mse,
            self.copy_baseline_score,
            self.mean_first_step_energy,
            self.mean_last_step_energy,
            self.alpha,
            self.grad_norm,
            self.lr,
            self.cumulative_flops,
            self.wall_seconds,
        ];
        let mut out = format!("{},{},{}", self.step, self.epoch, self.split);
        for v in nums {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out
    }

    fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != COLUMNS.len() {
            return None;
        }
        let n = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            epoch: n(1)?,
            split: f[2].into(),
            loss: n(3)?,
            perplexity_or_mse: n(4)?,
            copy_baseline_score: n(5)?,
            mean_first_step_energy: n(6)?,
            mean_last_step_energy: n(7)?,
            alpha: n(8)?,
            grad_norm: n(9)?,
            lr: n(10)?,
            cumulative_flops: n(11)?,
            wall_seconds: n(12)?,
        })
    }
}

pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let head = format!(
            "# flops_convention={FLOPS_CONVENTION}; {VALIDATION_CONVENTION}\n{}\n",
            COLUMNS.join(",")
        );
        file.write_all(head.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let line = row.to_csv() + "\n";
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Read every complete row, skipping the comment, the header and a
/// truncated final line.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.starts_with("step,") || line.is_empty() {
            continue;
        }
        match MetricsRow::from_csv(&line) {
            Some(r) => rows.push(r),
            None => log::warn!("skipping malformed metrics line: {line}"),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_and_survive_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut r = MetricsRow::new(1, "train");
        r.loss = 0.25;
        r.cumulative_flops = 1e9;
        w.write(&r).unwrap();
        r.step = 2;
        r.loss = f64::INFINITY;
        w.write(&r).unwrap();
        drop(w);
        // simulate a crash mid-write
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap();
        f.write_all(b"3,NaN,tra").unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].loss, 0.25);
        assert!(rows[0].epoch.is_nan());
        assert_eq!(rows[1].loss, f64::INFINITY);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# flops_convention="));
        assert_eq!(text.lines().nth(1).unwrap(), COLUMNS.join(","));
    }
}
