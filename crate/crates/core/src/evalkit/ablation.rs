use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocols::{eval_no_finetune, EvalBudget};
use super::report::Aggregate;
use crate::archgraph::ArchGraph;
use crate::data::Dataset;
use crate::error::Result;
use crate::ghn::{GhnConfig, GhnModel};
use crate::trainer::{train, TrainConfig};

/// Structural variants of the hypernetwork compared in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Forward and backward distance embeddings through the edge MLP.
    Full,
    /// Forward distances only, one table lookup per pair.
    NoBw,
    /// Self-attention without any edge bias.
    SaOnly,
    /// No attention: per-node MLP blocks only.
    MlpOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoBw, Variant::SaOnly, Variant::MlpOnly];

    pub fn apply(self, base: &GhnConfig) -> GhnConfig {
        let mut c = base.clone();
        c.use_sa = self != Variant::MlpOnly;
        c.use_fw_edges = matches!(self, Variant::Full | Variant::NoBw);
        c.use_bw_edges = self == Variant::Full;
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBw => "no_bw",
            Variant::SaOnly => "sa_only",
            Variant::MlpOnly => "mlp_only",
        }
    }
}

/// One grid cell: a structural variant and a `(reg_coef, weight_decay)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub reg_coef: f64,
    pub weight_decay: f64,
}

impl AblationCell {
    pub fn label(&self) -> String {
        format!("{}/reg={}/wd={}", self.variant.name(), self.reg_coef, self.weight_decay)
    }
}

/// Every `(variant, regularisation)` combination, each exactly once.
pub fn ablation_grid(variants: &[Variant], regs: &[(f64, f64)]) -> Vec<AblationCell> {
    variants
        .iter()
        .flat_map(|&variant| {
            regs.iter().map(move |&(reg_coef, weight_decay)| AblationCell {
                variant,
                reg_coef,
                weight_decay,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// No-fine-tune accuracy over the held-out architectures.
    pub accuracy: Option<Aggregate>,
    /// Mean absolute predicted parameter over the held-out architectures.
    pub mean_abs: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean and spread over seeds of each cell's mean accuracy.
    pub fn summary(&self, cell: &AblationCell) -> Aggregate {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| &r.cell == cell)
            .filter_map(|r| r.accuracy.map(|a| a.mean))
            .collect();
        Aggregate::of(&v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::Error::format(path, e.to_string()))?;
        w.write_record(["variant", "reg_coef", "weight_decay", "seed", "mean", "std", "mean_abs", "error"])
            .map_err(|e| crate::Error::format(path, e.to_string()))?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.cell.variant.name().to_string(),
                r.cell.reg_coef.to_string(),
                r.cell.weight_decay.to_string(),
                r.seed.to_string(),
                opt(r.accuracy.map(|a| a.mean)),
                opt(r.accuracy.map(|a| a.std)),
                opt(r.mean_abs),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| crate::Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one hypernetwork per cell and seed on `train_archs` and scores it
/// on `held_out`. A failing cell is recorded and the sweep continues.
/// `progress` is called after every finished row, with the trained model
/// when training succeeded.
pub fn ablation_sweep(
    train_archs: &[ArchGraph],
    held_out: &[ArchGraph],
    data: &Dataset,
    base_ghn: &GhnConfig,
    base_train: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    budget: EvalBudget,
    mut progress: impl FnMut(&AblationRow, Option<&GhnModel<f32>>),
) -> AblationTable {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for &seed in seeds {
        for cell in cells {
            let ghn = GhnConfig {
                seed,
                ..cell.variant.apply(base_ghn)
            };
            let tc = TrainConfig {
                seed,
                reg_coef: cell.reg_coef,
                weight_decay: cell.weight_decay,
                ..base_train.clone()
            };
            let (row, model) = match train(GhnModel::<f32>::new(ghn), train_archs, data, &tc, None) {
                Ok((model, _)) => {
                    let report = eval_no_finetune(&model, held_out, data, budget);
                    let mean_abs = super::mean_abs_predicted(&model, held_out).ok();
                    let row = AblationRow {
                        cell: cell.clone(),
                        seed,
                        accuracy: Some(report.all),
                        mean_abs,
                        error: None,
                    };
                    (row, Some(model))
                }
                Err(e) => {
                    let row = AblationRow {
                        cell: cell.clone(),
                        seed,
                        accuracy: None,
                        mean_abs: None,
                        error: Some(e.to_string()),
                    };
                    (row, None)
                }
            };
            progress(&row, model.as_ref());
            rows.push(row);
        }
    }
    AblationTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ghn::EdgeMode;

    #[test]
    fn grid_enumerates_each_cell_once() {
        let regs = [(3e-5, 1e-2), (0.0, 1e-2), (3e-5, 0.0)];
        let grid = ablation_grid(&Variant::ALL, &regs);
        assert_eq!(grid.len(), 12);
        for (i, a) in grid.iter().enumerate() {
            assert!(grid[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(grid[0].variant, Variant::Full);
    }

    #[test]
    fn variants_map_to_edge_modes() {
        let base = GhnConfig::default();
        let modes: Vec<EdgeMode> = Variant::ALL.iter().map(|v| v.apply(&base).edge_mode()).collect();
        assert_eq!(modes, [EdgeMode::Ghn3, EdgeMode::Graphormer, EdgeMode::None, EdgeMode::None]);
        assert!(!Variant::MlpOnly.apply(&base).use_sa);
    }
}
