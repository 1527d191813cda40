//! Meta-batch training of the hypernetwork: predicted-parameter losses,
//! AdamW with a cosine schedule, sharded gradient averaging and resumable
//! checkpoints.

mod optim;
mod run;
mod step;

use ghnforge_tape::{lit, Scalar, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use optim::{cosine_lr, AdamW};
pub use run::{train, MetricsRow, TrainRun, Trainer, METRICS_HEADER};
pub use step::{meta_gradients, train_step, StepLoss};

use crate::error::{Error, Result};
use crate::ghn::PredictedParams;
use crate::target_net::{ParamSet, ParamSource};

/// Penalty applied to predicted parameters during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegForm {
    /// Sum over layers of each tensor's Euclidean norm.
    GroupL2,
    /// Sum of squared elements.
    Squared,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled weight decay on the hypernetwork parameters.
    pub weight_decay: f64,
    pub reg_coef: f64,
    pub reg_form: RegForm,
    /// Architectures per step.
    pub meta_batch: usize,
    /// Images per step, shared by the architectures of the meta-batch.
    pub data_batch: usize,
    /// Workers the meta-batch is split across.
    pub shards: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub augment: bool,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Free-form identifiers recorded with every run.
    pub dataset: String,
    pub space: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 4e-4,
            weight_decay: 1e-2,
            reg_coef: 3e-5,
            reg_form: RegForm::GroupL2,
            meta_batch: 4,
            data_batch: 64,
            shards: 1,
            grad_clip: 5.0,
            augment: true,
            checkpoint_every: 0,
            seed: 0,
            dataset: String::new(),
            space: String::new(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: 75 epochs, 128 images and 8 architectures per step.
    pub fn full_scale() -> Self {
        Self {
            epochs: 75,
            data_batch: 128,
            meta_batch: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.meta_batch == 0 || self.data_batch == 0 || self.shards == 0 {
            return bad("meta_batch, data_batch and shards must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.weight_decay < 0.0 || self.reg_coef < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay, reg_coef and grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Steps per epoch: every architecture is visited once per epoch in
    /// whole meta-batches; a remainder smaller than `meta_batch` is skipped.
    pub fn steps_per_epoch(&self, n_archs: usize) -> usize {
        n_archs / self.meta_batch
    }

    pub fn total_steps(&self, n_archs: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_archs)
    }
}

/// The penalty of `form` over the predicted slots of `p`; fallback slots
/// are not counted.
pub fn reg_penalty<T: Scalar>(p: &PredictedParams<T>, form: RegForm) -> f64 {
    p.params
        .tensors
        .iter()
        .filter(|(id, _)| p.slot_source.get(id) != Some(&ParamSource::RandomInit))
        .map(|(_, t)| {
            let sq: f64 = t.iter().map(|v| v.to_f64().unwrap().powi(2)).sum();
            match form {
                RegForm::GroupL2 => sq.sqrt(),
                RegForm::Squared => sq,
                RegForm::None => 0.0,
            }
        })
        .sum()
}

/// Differentiable version of [`reg_penalty`] over recorded tensors.
pub(crate) fn reg_var<'t, T: Scalar>(vars: &[Var<'t, T>], form: RegForm) -> Option<Var<'t, T>> {
    let terms: Vec<Var<'t, T>> = match form {
        RegForm::GroupL2 => vars.iter().map(|v| v.l2_norm()).collect(),
        RegForm::Squared => vars.iter().map(|v| v.sum_sq()).collect(),
        RegForm::None => return None,
    };
    (!terms.is_empty()).then(|| Var::add_n(&terms))
}

/// Adds `beta` times standard-normal noise to every element.
pub fn add_symmetry_noise<T: Scalar>(p: &ParamSet<T>, beta: f64, rng: &mut impl Rng) -> ParamSet<T> {
    assert!(beta >= 0.0, "noise scale must be non-negative");
    let mut out = p.clone();
    if beta == 0.0 {
        return out;
    }
    for t in out.tensors.values_mut() {
        t.mapv_inplace(|v| v + lit::<T>(beta * rng.sample::<f64, _>(StandardNormal)));
    }
    out
}
