//! Classification metrics and run reports.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        if truth >= k || predicted >= k {
            return Err(Error::Index {
                index: truth.max(predicted),
                extent: k,
            });
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Invalid("metrics of an empty confusion matrix".into()));
        }
        Ok(())
    }

    /// trace / total
    pub fn accuracy(&self) -> Result<f64> {
        self.nonempty()?;
        let trace: u64 = (0..self.classes()).map(|c| self.counts[c][c]).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Per-class F1; any 0/0 (precision, recall or F1) counts as 0.
    pub fn per_class_f1(&self) -> Result<Vec<f64>> {
        self.nonempty()?;
        let k = self.classes();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok((0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let row: u64 = self.counts[c].iter().sum();
                let col: u64 = (0..k).map(|r| self.counts[r][c]).sum();
                let (p, r) = (ratio(tp, col), ratio(tp, row));
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect())
    }

    /// Unweighted mean of per-class F1 over all `K` classes.
    pub fn macro_f1(&self) -> Result<f64> {
        let f1 = self.per_class_f1()?;
        Ok(f1.iter().sum::<f64>() / f1.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_sc: f64,
    pub loss_supcon: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub test_acc: f64,
    pub test_macro_f1: f64,
    /// Clean (unaugmented) accuracy on the training split after the last epoch.
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub f1_averaging: String,
    pub config: ExperimentConfig,
    pub split: SplitSizes,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
}

impl Report {
    /// Pretty JSON with round-trip float precision, newline-terminated.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Report> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("malformed report: {e}")))
    }
}

/// Assembles a report. The output path is dropped from the config echo so a
/// run's report does not depend on where it is written.
pub fn build_report(
    config: &ExperimentConfig,
    split: SplitSizes,
    parameters: usize,
    epochs: Vec<EpochRecord>,
    final_metrics: FinalMetrics,
) -> Report {
    let mut echo = config.clone();
    echo.output = None;
    Report {
        label: config.ablation.label(),
        f1_averaging: "macro".into(),
        config: echo,
        split,
        parameters,
        epochs,
        final_metrics,
    }
}

/// One row per ablation combination, all-on first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<Report>,
}

impl AblationGrid {
    /// `label, test_acc, test_macro_f1` lines.
    pub fn table(&self) -> String {
        let mut out = String::from("label,test_acc,test_macro_f1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4}\n",
                r.label, r.final_metrics.test_acc, r.final_metrics.test_macro_f1
            ));
        }
        out
    }
}
