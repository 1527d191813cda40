//! Evaluation protocols and analyses of predicted parameters.

mod ablation;
mod analysis;
mod hungarian;
mod protocols;
mod report;

use ghnforge_tape::Scalar;

pub use ablation::{ablation_grid, ablation_sweep, AblationCell, AblationRow, AblationTable, Variant};
pub use analysis::{
    abs_cosine_distance, diversity, diversity_by_shape, kendall_tau, median, variance_probe, DiversityReport,
    MatchMode, VarianceProbe,
};
pub use hungarian::min_cost_assignment;
pub use protocols::{compare_inits, eval_no_finetune, transfer_eval, Comparison, EvalBudget, TransferConfig};
pub use report::{Aggregate, EvalReport, EvalRow, InitKind};

use crate::archgraph::{compute_features, ArchGraph};
use crate::error::Result;
use crate::ghn::{predict_params, GhnModel};

/// Mean absolute predicted value, averaged over architectures.
pub fn mean_abs_predicted<T: Scalar>(model: &GhnModel<T>, archs: &[ArchGraph]) -> Result<f64> {
    let mut total = 0.0;
    for g in archs {
        total += predict_params(g, &compute_features(g, model.config().max_dist), model)?
            .params
            .mean_abs();
    }
    Ok(total / archs.len().max(1) as f64)
}
