//! Executes an [`ArchGraph`] as a differentiable classifier.

mod finetune;
mod params;

use std::collections::BTreeMap;

use ghnforge_tape::{lit, Scalar, Tape, Var};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

pub use finetune::{
    accuracy, sgd_finetune, FinetuneResult, FinetuneSchedule, LrRun, SgdMomentum,
};
pub use params::{random_init, reinit_head, ParamSet, ParamSource};
pub(crate) use params::{init_tensor, read_scalars, read_u32, scalar_width, write_scalars};

use crate::archgraph::{ArchGraph, BnRole, OpKind};
use crate::data::Batch;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Variance of every conv/linear output for one batch, in node order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<(usize, f64)>,
}

impl ActivationTrace {
    pub fn variances(&self) -> Vec<f64> {
        self.layers.iter().map(|&(_, v)| v).collect()
    }
}

/// Running batch-norm statistics per scale node, maintained while
/// fine-tuning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnRunning<T> {
    pub mean: BTreeMap<usize, Vec<T>>,
    pub var: BTreeMap<usize, Vec<T>>,
}

/// How batch-norm scale nodes normalise.
pub enum BnMode<'a, T> {
    /// Statistics of the current batch.
    Batch,
    /// Batch statistics, folding them into running estimates.
    Update(&'a mut BnRunning<T>, f64),
    /// Fixed running estimates.
    Running(&'a BnRunning<T>),
}

/// Records the network on `tape`. `params[id]` holds the tensor of every
/// parametric node.
pub fn build_forward<'t, T: Scalar>(
    g: &ArchGraph,
    params: &[Option<Var<'t, T>>],
    x: Var<'t, T>,
    bn: &mut BnMode<'_, T>,
    trace: Option<&mut ActivationTrace>,
) -> Result<Var<'t, T>> {
    let acts = build_nodes(g, params, x, bn, trace)?;
    Ok(acts[g.sink()])
}

/// Like [`build_forward`] but returns the output of every node.
pub fn build_nodes<'t, T: Scalar>(
    g: &ArchGraph,
    params: &[Option<Var<'t, T>>],
    x: Var<'t, T>,
    bn: &mut BnMode<'_, T>,
    mut trace: Option<&mut ActivationTrace>,
) -> Result<Vec<Var<'t, T>>> {
    let (c, h, w) = g.input_dims();
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != [c, h, w] {
        return Err(Error::ShapeMismatch {
            node: 0,
            detail: format!("graph expects [B, {c}, {h}, {w}] images, got {xs:?}"),
        });
    }
    let eps: T = lit(BN_EPS);
    let mut acts: Vec<Option<Var<'t, T>>> = vec![None; g.len()];
    for node in g.nodes() {
        let id = node.id;
        let ins: Vec<Var<'t, T>> = g.preds(id).iter().map(|&p| acts[p].unwrap()).collect();
        let param = || params[id].expect("missing parameter tensor");
        let y = match node.op {
            OpKind::Input => x,
            OpKind::Conv2d => ins[0].conv2d(param(), node.stride(), node.kernel() / 2),
            OpKind::Linear | OpKind::ClassifierHead => ins[0].matmul_nt(param()),
            OpKind::BatchNorm => match node.bn_role().unwrap() {
                BnRole::Scale => normalize(ins[0], id, bn, eps).mul_channel(param()),
                BnRole::Shift => ins[0].add_channel(param()),
            },
            OpKind::Relu => ins[0].relu(),
            OpKind::Silu => ins[0].silu(),
            OpKind::MaxPool => ins[0].max_pool2d(node.kernel(), node.stride()),
            OpKind::AvgPool => ins[0].avg_pool2d(node.kernel(), node.stride()),
            OpKind::GlobalAvgPool => ins[0].global_avg_pool(),
            OpKind::Add => Var::add_n(&ins),
            OpKind::Concat => Var::concat(&ins, 1),
        };
        let value = y.value();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation(id));
        }
        if node.op.is_traced() {
            if let Some(t) = trace.as_deref_mut() {
                t.layers.push((id, variance(&value)));
            }
        }
        acts[id] = Some(y);
    }
    Ok(acts.into_iter().map(Option::unwrap).collect())
}

fn normalize<'t, T: Scalar>(x: Var<'t, T>, id: usize, bn: &mut BnMode<'_, T>, eps: T) -> Var<'t, T> {
    match bn {
        BnMode::Batch => x.batch_norm(eps).0,
        BnMode::Update(running, momentum) => {
            let (y, stats) = x.batch_norm(eps);
            let shape = x.shape();
            let count = shape.iter().product::<usize>() / shape[1];
            let unbias: T = lit(count as f64 / (count.max(2) - 1) as f64);
            let m: T = lit(*momentum);
            let one = T::one();
            let mean = running.mean.entry(id).or_insert_with(|| vec![T::zero(); stats.mean.len()]);
            for (r, &b) in mean.iter_mut().zip(&stats.mean) {
                *r = (one - m) * *r + m * b;
            }
            let var = running.var.entry(id).or_insert_with(|| vec![T::one(); stats.var.len()]);
            for (r, &b) in var.iter_mut().zip(&stats.var) {
                *r = (one - m) * *r + m * b * unbias;
            }
            y
        }
        BnMode::Running(running) => match (running.mean.get(&id), running.var.get(&id)) {
            (Some(mean), Some(var)) => x.normalize_with(mean, var, eps),
            _ => x.batch_norm(eps).0,
        },
    }
}

fn variance<T: Scalar>(a: &ArrayD<T>) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    a.iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

fn bind<'t, T: Scalar>(tape: &'t Tape<T>, g: &ArchGraph, p: &ParamSet<T>, track: bool) -> Vec<Option<Var<'t, T>>> {
    let mut out = vec![None; g.len()];
    for (&id, t) in &p.tensors {
        out[id] = Some(if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) });
    }
    out
}

/// Logits for `batch`, with batch-statistics normalisation.
pub fn forward<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    batch: &Batch<T>,
    trace: bool,
) -> Result<(ArrayD<T>, Option<ActivationTrace>)> {
    p.validate(g)?;
    let tape = Tape::new();
    let vars = bind(&tape, g, p, false);
    let mut tr = trace.then(ActivationTrace::default);
    let x = tape.constant(batch.images.clone());
    let out = build_forward(g, &vars, x, &mut BnMode::Batch, tr.as_mut())?;
    let logits = (*out.value()).clone();
    Ok((logits, tr))
}

/// Logits using fixed running statistics.
pub fn forward_with_running<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    running: &BnRunning<T>,
    batch: &Batch<T>,
) -> Result<ArrayD<T>> {
    let tape = Tape::new();
    let vars = bind(&tape, g, p, false);
    let x = tape.constant(batch.images.clone());
    let out = build_forward(g, &vars, x, &mut BnMode::Running(running), None)?;
    Ok((*out.value()).clone())
}

/// Mean cross-entropy on `batch` and its gradient for every tensor of `p`.
pub fn loss_and_grads<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    batch: &Batch<T>,
) -> Result<(T, BTreeMap<usize, ArrayD<T>>)> {
    p.validate(g)?;
    loss_and_grads_with(g, p, batch, &mut BnMode::Batch)
}

pub(crate) fn loss_and_grads_with<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    batch: &Batch<T>,
    bn: &mut BnMode<'_, T>,
) -> Result<(T, BTreeMap<usize, ArrayD<T>>)> {
    let tape = Tape::new();
    let vars = bind(&tape, g, p, true);
    let x = tape.constant(batch.images.clone());
    let loss = build_forward(g, &vars, x, bn, None)?.cross_entropy(&batch.labels);
    let value = loss.item();
    let mut grads = tape.backward(loss);
    let out = p
        .tensors
        .keys()
        .map(|&id| {
            let v = vars[id].unwrap();
            let gr = grads.take(v).unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()));
            (id, gr)
        })
        .collect();
    Ok((value, out))
}
