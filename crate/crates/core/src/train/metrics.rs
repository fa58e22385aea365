//! Dice similarity, metric records and the metrics CSV.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,class_id,dsc,dice_loss,ce_loss,trainable_fraction";

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_coefficient(pred: &[bool], truth: &[bool]) -> f64 {
    let inter = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count();
    let total = pred.iter().filter(|p| **p).count() + truth.iter().filter(|t| **t).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Voxel counts per class accumulated over a split; DSC is computed on the
/// pooled counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceAccumulator {
    inter: Vec<u64>,
    pred: Vec<u64>,
    truth: Vec<u64>,
}

impl DiceAccumulator {
    pub fn new(n_channels: usize) -> Self {
        Self { inter: vec![0; n_channels], pred: vec![0; n_channels], truth: vec![0; n_channels] }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("dice", &[pred.len()], &[truth.len()]));
        }
        let n = self.inter.len();
        for (p, t) in pred.iter().zip(truth) {
            let (p, t) = (*p as usize, *t as usize);
            if p >= n || t >= n {
                return Err(Error::Registry(format!("channel {} outside {n}", p.max(t))));
            }
            self.pred[p] += 1;
            self.truth[t] += 1;
            if p == t {
                self.inter[p] += 1;
            }
        }
        Ok(())
    }

    pub fn dsc(&self, channel: usize) -> f64 {
        let total = self.pred[channel] + self.truth[channel];
        if total == 0 {
            1.0
        } else {
            2.0 * self.inter[channel] as f64 / total as f64
        }
    }

    pub fn present(&self, channel: usize) -> bool {
        self.truth[channel] > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    /// `(class_id, dsc, present in split)` per tumor class.
    pub per_class: Vec<(u8, f64, bool)>,
    pub mean_dsc: f64,
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub trainable_fraction: f64,
}

impl MetricRecord {
    /// Unweighted mean over classes present in the split (1 if none are).
    pub fn mean_over_present(per_class: &[(u8, f64, bool)]) -> f64 {
        let present: Vec<f64> = per_class.iter().filter(|c| c.2).map(|c| c.1).collect();
        if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.per_class
            .iter()
            .map(|(c, dsc, _)| {
                format!(
                    "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    self.epoch, self.split, c, dsc, self.dice_loss, self.ce_loss, self.trainable_fraction
                )
            })
            .collect()
    }

    /// Appends rows to `path`, writing the header first if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        for r in self.csv_rows() {
            text.push_str(&r);
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
