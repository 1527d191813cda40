use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the evaluated parameters were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Predicted,
    Random,
}

/// One evaluated (architecture, initialisation) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub arch: String,
    pub init: InitKind,
    pub steps: usize,
    /// Top-1 in percent; absent when the run failed.
    pub accuracy: Option<f64>,
    /// Learning rate of the kept fine-tuning run.
    pub lr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let count = values.len();
        if count == 0 {
            return Aggregate {
                count,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = count as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Aggregate { count, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Over rows with an accuracy.
    pub all: Aggregate,
    /// Over the `top_k` most accurate rows.
    pub top: Aggregate,
    pub top_k: usize,
    pub top_rule: String,
    pub failures: usize,
}

impl EvalReport {
    pub const TOP_K: usize = 10;

    pub fn from_rows(rows: Vec<EvalRow>) -> EvalReport {
        let mut acc: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
        let all = Aggregate::of(&acc);
        acc.sort_by(|a, b| b.total_cmp(a));
        acc.truncate(Self::TOP_K);
        EvalReport {
            failures: rows.iter().filter(|r| r.accuracy.is_none()).count(),
            rows,
            all,
            top: Aggregate::of(&acc),
            top_k: Self::TOP_K,
            top_rule: format!("the {} rows with the highest accuracy", Self::TOP_K),
        }
    }

    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.accuracy).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(a: Option<f64>) -> EvalRow {
        EvalRow {
            arch: "a".into(),
            init: InitKind::Predicted,
            steps: 0,
            accuracy: a,
            lr: None,
            error: a.is_none().then(|| "failed".into()),
        }
    }

    #[test]
    fn aggregates_skip_failures_and_pick_the_best_rows() {
        let mut rows: Vec<EvalRow> = (0..12).map(|i| row(Some(i as f64))).collect();
        rows.push(row(None));
        let r = EvalReport::from_rows(rows);
        assert_eq!(r.failures, 1);
        assert_eq!(r.all.count, 12);
        assert!((r.all.mean - 5.5).abs() < 1e-12);
        assert_eq!(r.top.count, 10);
        assert!((r.top.mean - 6.5).abs() < 1e-12);
    }
}
