use ghnforge_tape::{lit, Scalar, Tape};
use ndarray::ArrayD;
use rayon::prelude::*;

use super::{reg_var, AdamW, TrainConfig};
use crate::archgraph::{ArchGraph, GraphFeatures};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ghn::GhnModel;
use crate::target_net::{build_forward, BnMode, ParamSource};

/// Loss terms of one step, averaged over the meta-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    /// Unscaled penalty; the optimised loss is `ce + reg_coef * reg`.
    pub reg: f64,
    pub loss: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
}

struct ArchTerms<T> {
    ce: f64,
    reg: f64,
    grads: Vec<ArrayD<T>>,
}

fn arch_terms<T: Scalar>(
    model: &GhnModel<T>,
    g: &ArchGraph,
    feat: &GraphFeatures,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<ArchTerms<T>> {
    let non_finite = |detail: String| Error::NonFiniteLoss(format!("{}: {detail}", g.name()));
    let tape = Tape::new();
    let b = model.bind(&tape, true);
    let (vars, sources) = model.predict_vars(&b, g, feat)?;
    let x = tape.constant(batch.images.clone());
    let logits = build_forward(g, &vars, x, &mut BnMode::Batch, None).map_err(|e| match e {
        Error::NonFiniteActivation(node) => non_finite(format!("non-finite activation at node {node}")),
        other => other,
    })?;
    let ce = logits.cross_entropy(&batch.labels);
    let predicted: Vec<_> = sources
        .iter()
        .filter(|(_, &s)| s == ParamSource::Predicted)
        .map(|(&id, _)| vars[id].unwrap())
        .collect();
    let reg = reg_var(&predicted, cfg.reg_form);
    let reg_value = reg.map_or(0.0, |r| r.item().to_f64().unwrap());
    let loss = match reg {
        Some(r) if cfg.reg_coef > 0.0 => ce.add(r.scale(lit(cfg.reg_coef))),
        _ => ce,
    };
    let ce_value = ce.item().to_f64().unwrap();
    if !loss.item().is_finite() {
        return Err(non_finite(format!("loss {ce_value} (ce) + {reg_value} (reg)")));
    }
    let grads = tape.backward(loss);
    Ok(ArchTerms {
        ce: ce_value,
        reg: reg_value,
        grads: b.iter().map(|&v| grads.get_or_zeros(v)).collect(),
    })
}

fn add_into<T: Scalar>(acc: &mut ArchTerms<T>, other: ArchTerms<T>) {
    acc.ce += other.ce;
    acc.reg += other.reg;
    for (a, g) in acc.grads.iter_mut().zip(other.grads) {
        *a += &g;
    }
}

/// Mean loss over the meta-batch and its gradient for every hypernetwork
/// tensor. The meta-batch is split into `cfg.shards` contiguous shards
/// evaluated in parallel; each shard sums its architectures and the shard
/// sums are combined in order, then divided by the meta-batch size.
pub fn meta_gradients<T: Scalar>(
    model: &GhnModel<T>,
    archs: &[(&ArchGraph, &GraphFeatures)],
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(StepLoss, Vec<ArrayD<T>>)> {
    assert!(!archs.is_empty(), "empty meta-batch");
    let chunk = archs.len().div_ceil(cfg.shards.max(1));
    let shard_sum = |shard: &[(&ArchGraph, &GraphFeatures)]| -> Result<ArchTerms<T>> {
        let mut it = shard.iter();
        let &(g, f) = it.next().unwrap();
        let mut acc = arch_terms(model, g, f, batch, cfg)?;
        for &(g, f) in it {
            add_into(&mut acc, arch_terms(model, g, f, batch, cfg)?);
        }
        Ok(acc)
    };
    let shards: Vec<Result<ArchTerms<T>>> = if cfg.shards > 1 {
        archs.par_chunks(chunk).map(shard_sum).collect()
    } else {
        vec![shard_sum(archs)]
    };
    let mut it = shards.into_iter();
    let mut total = it.next().unwrap()?;
    for s in it {
        add_into(&mut total, s?);
    }
    let m = archs.len() as f64;
    let inv: T = lit(1.0 / m);
    let mut sq = 0.0;
    for g in &mut total.grads {
        g.mapv_inplace(|v| v * inv);
        sq += g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>();
    }
    let (ce, reg) = (total.ce / m, total.reg / m);
    let stats = StepLoss {
        ce,
        reg,
        loss: ce + cfg.reg_coef * reg,
        grad_norm: sq.sqrt(),
    };
    Ok((stats, total.grads))
}

/// One optimisation step of `model` on a meta-batch. On a non-finite loss
/// the model and optimiser are left untouched.
pub fn train_step<T: Scalar>(
    model: &mut GhnModel<T>,
    opt: &mut AdamW<T>,
    archs: &[(&ArchGraph, &GraphFeatures)],
    batch: &Batch<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepLoss> {
    let (stats, mut grads) = meta_gradients(model, archs, batch, cfg)?;
    if !stats.grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss(format!("gradient norm {}", stats.grad_norm)));
    }
    if cfg.grad_clip > 0.0 && stats.grad_norm > cfg.grad_clip {
        let s: T = lit(cfg.grad_clip / stats.grad_norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    opt.step(model.tensors_mut(), &grads, lr);
    Ok(stats)
}
