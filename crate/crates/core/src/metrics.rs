//! Confusion matrices, per-epoch history and the report writers.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K×K prediction counts; rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn row(&self, actual: usize) -> &[u64] {
        &self.counts[actual * self.k..(actual + 1) * self.k]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn update(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::invalid(
                "confusion",
                format!("{} predictions for {} labels", predictions.len(), labels.len()),
            ));
        }
        if let Some(bad) = predictions.iter().chain(labels).find(|&&c| c >= self.k) {
            return Err(Error::invalid(
                "confusion",
                format!("class id {bad} out of range for {} classes", self.k),
            ));
        }
        for (&p, &l) in predictions.iter().zip(labels) {
            self.counts[l * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid("confusion", "cannot merge matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("accuracy", "empty confusion matrix"));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Diagonal over row sum; `None` for classes with no samples.
    pub fn per_class_accuracy(&self) -> Result<Vec<Option<f64>>> {
        if self.total() == 0 {
            return Err(Error::invalid("per_class_accuracy", "empty confusion matrix"));
        }
        Ok((0..self.k)
            .map(|c| {
                let row: u64 = self.row(c).iter().sum();
                (row > 0).then(|| self.get(c, c) as f64 / row as f64)
            })
            .collect())
    }

    /// CSV with a header row and column of class names; cells are raw counts.
    pub fn write_csv(&self, class_names: &[String], path: &Path) -> Result<()> {
        if class_names.len() != self.k {
            return Err(Error::invalid(
                "write_confusion",
                format!("{} names for {} classes", class_names.len(), self.k),
            ));
        }
        let to_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        let mut header = vec!["actual\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header).map_err(to_err)?;
        for (c, name) in class_names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.row(c).iter().map(u64::to_string));
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<(Vec<String>, ConfusionMatrix)> {
        let to_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(to_err)?;
        let names: Vec<String> = r.headers().map_err(to_err)?.iter().skip(1).map(String::from).collect();
        let mut cm = ConfusionMatrix::new(names.len());
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(to_err)?;
            for (col, cell) in rec.iter().skip(1).enumerate() {
                let v: u64 = cell
                    .parse()
                    .map_err(|_| Error::Serde(format!("{}: bad count {cell:?}", path.display())))?;
                cm.counts[row * cm.k + col] = v;
            }
        }
        Ok((names, cm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub config_digest: String,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl History {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            records: Vec::new(),
            best_epoch: 0,
            stop_reason: StopReason::Completed,
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_seconds).sum()
    }

    /// One line with the four fields of the usual results table:
    /// epochs trained, total time, time per epoch, accuracy (best epoch).
    pub fn summary_line(&self) -> String {
        let n = self.records.len();
        let total = self.total_seconds();
        let per_epoch = if n > 0 { total / n as f64 } else { 0.0 };
        let acc = self.best().map(|r| r.val_acc * 100.0).unwrap_or(f64::NAN);
        format!(
            "epochs_trained={n} total_time={} time_per_epoch={:.1}s accuracy={acc:.2}% best_epoch={}",
            format_hms(total),
            per_epoch,
            self.best_epoch
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let to_err = |e: csv::Error| Error::Serde(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        for r in &self.records {
            w.serialize(r).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", self.summary_line()).map_err(|e| Error::io(path, e))
    }
}

/// `1h 47min 24s` style duration.
pub fn format_hms(seconds: f64) -> String {
    let s = seconds.max(0.0).round() as u64;
    let (h, m, s) = (s / 3600, (s % 3600) / 60, s % 60);
    if h > 0 {
        format!("{h}h {m}min {s}s")
    } else if m > 0 {
        format!("{m}min {s}s")
    } else {
        format!("{s}s")
    }
}
