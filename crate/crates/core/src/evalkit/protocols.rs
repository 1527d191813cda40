use ghnforge_tape::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{EvalReport, EvalRow, InitKind};
use crate::archgraph::{compute_features, ArchGraph};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::ghn::{predict_params, GhnModel};
use crate::target_net::{accuracy, random_init, reinit_head, sgd_finetune, FinetuneSchedule, ParamSet};
use crate::trainer::add_symmetry_noise;

/// Validation images scored per architecture (0 = the whole split).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBudget {
    pub samples: usize,
    pub batch: usize,
}

impl Default for EvalBudget {
    fn default() -> Self {
        Self { samples: 0, batch: 250 }
    }
}

fn predicted<T: Scalar>(model: &GhnModel<T>, g: &ArchGraph) -> Result<ParamSet<T>> {
    Ok(predict_params(g, &compute_features(g, model.config().max_dist), model)?.params)
}

fn failed(arch: &str, init: InitKind, steps: usize, e: impl ToString) -> EvalRow {
    EvalRow {
        arch: arch.into(),
        init,
        steps,
        accuracy: None,
        lr: None,
        error: Some(e.to_string()),
    }
}

/// Accuracy of every architecture evaluated directly with predicted
/// parameters. Batch normalisation uses the statistics of each evaluation
/// batch.
pub fn eval_no_finetune<T: Scalar>(
    model: &GhnModel<T>,
    archs: &[ArchGraph],
    data: &Dataset,
    budget: EvalBudget,
) -> EvalReport {
    let rows = archs
        .par_iter()
        .map(|g| {
            let acc = predicted(model, g)
                .and_then(|p| accuracy(g, &p, None, data, Split::Val, budget.samples, budget.batch));
            match acc {
                Ok(a) => EvalRow {
                    arch: g.name().into(),
                    init: InitKind::Predicted,
                    steps: 0,
                    accuracy: Some(a),
                    lr: None,
                    error: None,
                },
                Err(e) => failed(g.name(), InitKind::Predicted, 0, e),
            }
        })
        .collect();
    EvalReport::from_rows(rows)
}

/// Fine-tuning from predicted versus random parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub predicted: EvalReport,
    pub random: EvalReport,
    /// Fraction of architectures where the predicted arm is more accurate;
    /// ties count one half, pairs with a failed arm are skipped.
    pub win_rate: f64,
    /// Mean accuracy difference (predicted - random) in points.
    pub avg_gain: f64,
    pub pairs: usize,
}

impl Comparison {
    pub fn from_reports(predicted: EvalReport, random: EvalReport) -> Comparison {
        let mut wins = 0.0;
        let mut gain = 0.0;
        let mut pairs = 0;
        for (p, r) in predicted.rows.iter().zip(&random.rows) {
            if let (Some(p), Some(r)) = (p.accuracy, r.accuracy) {
                pairs += 1;
                gain += p - r;
                wins += match p.total_cmp(&r) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        let n = pairs.max(1) as f64;
        Comparison {
            predicted,
            random,
            win_rate: wins / n,
            avg_gain: gain / n,
            pairs,
        }
    }
}

/// Per-architecture seed for random initialisations and noise.
fn arch_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn finetune_row<T: Scalar>(g: &ArchGraph, p: &ParamSet<T>, data: &Dataset, sched: &FinetuneSchedule, init: InitKind) -> EvalRow {
    match sgd_finetune(g, p, data, sched) {
        Ok(r) => EvalRow {
            arch: g.name().into(),
            init,
            steps: sched.steps,
            accuracy: Some(r.accuracy),
            lr: Some(r.lr),
            error: None,
        },
        Err(e) => failed(g.name(), init, sched.steps, e),
    }
}

/// Fine-tunes every architecture from predicted parameters (plus noise of
/// scale `beta`) and from a random initialisation with the same schedule.
pub fn compare_inits<T: Scalar>(
    model: &GhnModel<T>,
    archs: &[ArchGraph],
    data: &Dataset,
    sched: &FinetuneSchedule,
    beta: f64,
) -> Result<Comparison> {
    sched.validate()?;
    let pairs: Vec<(EvalRow, EvalRow)> = archs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(arch_seed(sched.seed, i));
            let pred = match predicted(model, g) {
                Ok(p) => finetune_row(g, &add_symmetry_noise(&p, beta, &mut rng), data, sched, InitKind::Predicted),
                Err(e) => failed(g.name(), InitKind::Predicted, sched.steps, e),
            };
            let rand: ParamSet<T> = random_init(g, &mut rng);
            (pred, finetune_row(g, &rand, data, sched, InitKind::Random))
        })
        .collect();
    let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Comparison::from_reports(EvalReport::from_rows(p), EvalReport::from_rows(r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Fine-tuning on the source data before the head is replaced; zero
    /// steps skips it.
    pub source: FinetuneSchedule,
    pub target: FinetuneSchedule,
    /// Training images drawn from the target data.
    pub few_shot: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            source: FinetuneSchedule {
                steps: 0,
                ..FinetuneSchedule::default()
            },
            target: FinetuneSchedule::default(),
            few_shot: 1000,
            beta: 1e-5,
            seed: 0,
        }
    }
}

/// Predict, optionally fine-tune on the source data, re-initialise the
/// classifier for the target classes and fine-tune on a few-shot subset of
/// the target data. Returns the report and the subset used.
pub fn transfer_eval<T: Scalar>(
    model: &GhnModel<T>,
    archs: &[ArchGraph],
    src: &Dataset,
    dst: &Dataset,
    cfg: &TransferConfig,
) -> Result<(EvalReport, Vec<usize>)> {
    cfg.target.validate()?;
    let ids = dst.subset_ids(cfg.few_shot, cfg.seed);
    let few = dst.with_train_subset(&ids);
    let rows = archs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(arch_seed(cfg.seed, i));
            let mut run = || -> Result<EvalRow> {
                let mut p = add_symmetry_noise(&predicted(model, g)?, cfg.beta, &mut rng);
                if cfg.source.steps > 0 {
                    p = sgd_finetune(g, &p, src, &cfg.source)?.params;
                }
                let (g2, p2) = reinit_head(g, &p, dst.num_classes(), &mut rng)?;
                Ok(finetune_row(&g2, &p2, &few, &cfg.target, InitKind::Predicted))
            };
            run().unwrap_or_else(|e| failed(g.name(), InitKind::Predicted, cfg.target.steps, e))
        })
        .collect();
    Ok((EvalReport::from_rows(rows), ids))
}
