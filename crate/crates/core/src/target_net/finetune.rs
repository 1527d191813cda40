use std::collections::BTreeMap;
use std::f64::consts::PI;

use ghnforge_tape::{lit, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{forward_with_running, loss_and_grads_with, BnMode, BnRunning, ParamSet};
use crate::archgraph::ArchGraph;
use crate::data::{Dataset, Sampler, Split};
use crate::error::{Error, Result};

/// Fine-tuning protocol: SGD with momentum, run once per learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSchedule {
    pub lrs: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine decay from each swept rate towards zero over `steps`.
    pub cosine: bool,
    pub bn_momentum: f64,
    pub augment: bool,
    /// Validation images used to score each run; 0 means the whole split.
    pub eval_samples: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            lrs: vec![0.1, 0.01],
            steps: 200,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 3e-5,
            cosine: true,
            bn_momentum: 0.1,
            augment: true,
            eval_samples: 0,
            eval_batch: 250,
            seed: 0,
        }
    }
}

impl FinetuneSchedule {
    /// Step count covering `epochs` passes over `n_train` samples.
    pub fn steps_for_epochs(epochs: f64, n_train: usize, batch_size: usize) -> usize {
        (epochs * n_train as f64 / batch_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lrs must be a non-empty list of positive rates".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, step: usize) -> f64 {
        if self.cosine && self.steps > 0 {
            base * 0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos())
        } else {
            base
        }
    }
}

/// Classical momentum: `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<usize, ArrayD<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut BTreeMap<usize, ArrayD<T>>, grads: &BTreeMap<usize, ArrayD<T>>, lr: f64) {
        let (mu, wd, lr): (T, T, T) = (lit(self.momentum), lit(self.weight_decay), lit(lr));
        for (id, w) in params.iter_mut() {
            let Some(g) = grads.get(id) else { continue };
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| ArrayD::zeros(w.raw_dim()));
            ndarray::Zip::from(&mut *v)
                .and(&*w)
                .and(g)
                .for_each(|v, &w, &g| *v = mu * *v + g + wd * w);
            w.zip_mut_with(v, |w, &v| *w -= lr * v);
        }
    }
}

/// Outcome of one swept learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub lr: f64,
    /// Validation top-1 in percent; `None` if the run diverged.
    pub accuracy: Option<f64>,
    pub diverged_at: Option<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult<T> {
    pub params: ParamSet<T>,
    pub running: BnRunning<T>,
    pub lr: f64,
    pub accuracy: f64,
    pub runs: Vec<LrRun>,
}

/// Top-1 accuracy (percent) on the first `n` samples of `split`
/// (all when `n == 0`). Batch statistics are used unless `running` is given.
pub fn accuracy<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    running: Option<&BnRunning<T>>,
    data: &Dataset,
    split: Split,
    n: usize,
    eval_batch: usize,
) -> Result<f64> {
    let total = if n == 0 { data.len(split) } else { n.min(data.len(split)) };
    let empty = BnRunning::default();
    let running = running.unwrap_or(&empty);
    let mut correct = 0usize;
    let mut start = 0;
    while start < total {
        let end = (start + eval_batch).min(total);
        let idx: Vec<usize> = (start..end).collect();
        let batch = data.batch::<T>(split, &idx, None);
        let logits = forward_with_running(g, p, running, &batch)?;
        for (row, &y) in logits.outer_iter().zip(&batch.labels) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(best == y);
        }
        start = end;
    }
    Ok(100.0 * correct as f64 / total.max(1) as f64)
}

/// Fine-tunes a copy of `p` once per swept learning rate and keeps the run
/// with the best validation accuracy. Diverged runs are recorded and
/// skipped; the call fails only if every run diverges.
pub fn sgd_finetune<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    data: &Dataset,
    sched: &FinetuneSchedule,
) -> Result<FinetuneResult<T>> {
    sched.validate()?;
    p.validate(g)?;
    let mut runs = Vec::with_capacity(sched.lrs.len());
    let mut best: Option<FinetuneResult<T>> = None;
    let mut last_div = (0.0, 0);
    for &lr in &sched.lrs {
        let mut params = p.clone();
        let mut running = BnRunning::default();
        let mut opt = SgdMomentum::new(sched.momentum, sched.weight_decay);
        let mut sampler = Sampler::new(data.len(Split::Train), sched.seed, sched.augment);
        let mut losses = Vec::with_capacity(sched.steps);
        let mut diverged_at = None;
        for step in 0..sched.steps {
            let batch = sampler.next_batch::<T>(data, sched.batch_size);
            let mut mode = BnMode::Update(&mut running, sched.bn_momentum);
            match loss_and_grads_with(g, &params, &batch, &mut mode) {
                Ok((loss, grads)) if loss.is_finite() => {
                    losses.push(loss.to_f64().unwrap());
                    opt.step(&mut params.tensors, &grads, sched.lr_at(lr, step));
                }
                Ok(_) | Err(Error::NonFiniteActivation(_)) => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let acc = match diverged_at {
            Some(_) => None,
            None => {
                let stats = (sched.steps > 0).then_some(&running);
                match accuracy(g, &params, stats, data, Split::Val, sched.eval_samples, sched.eval_batch) {
                    Ok(a) => Some(a),
                    Err(Error::NonFiniteActivation(_)) => {
                        diverged_at = Some(sched.steps);
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        if let Some(step) = diverged_at {
            last_div = (lr, step);
        }
        runs.push(LrRun {
            lr,
            accuracy: acc,
            diverged_at,
            losses,
        });
        if let Some(a) = acc {
            if best.as_ref().is_none_or(|b| a > b.accuracy) {
                best = Some(FinetuneResult {
                    params,
                    running,
                    lr,
                    accuracy: a,
                    runs: Vec::new(),
                });
            }
        }
    }
    let mut best = best.ok_or(Error::Diverged {
        lr: last_div.0,
        step: last_div.1,
    })?;
    best.runs = runs;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> BTreeMap<usize, ArrayD<f64>> {
        BTreeMap::from([(0, ndarray::arr0(v).into_dyn())])
    }

    #[test]
    fn one_step_on_half_square() {
        let mut opt = SgdMomentum::new(0.0, 0.0);
        let mut w = scalar(1.0);
        let g = scalar(1.0);
        opt.step(&mut w, &g, 0.1);
        assert!((w[&0].sum() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_follows_the_recurrence() {
        let (mu, lr) = (0.9, 0.1);
        let mut opt = SgdMomentum::new(mu, 0.0);
        let mut w = scalar(1.0);
        for _ in 0..2 {
            let g = scalar(w[&0].sum());
            opt.step(&mut w, &g, lr);
        }
        // v1 = 1, w1 = 0.9; v2 = 0.9 + 0.9 = 1.8, w2 = 0.9 - 0.18.
        let (mut v, mut x) = (0.0, 1.0);
        for _ in 0..2 {
            v = mu * v + x;
            x -= lr * v;
        }
        assert!((w[&0].sum() - x).abs() < 1e-15);
        assert!((x - 0.72).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_joins_the_gradient() {
        let mut opt = SgdMomentum::new(0.0, 0.5);
        let mut w = scalar(2.0);
        opt.step(&mut w, &scalar(0.0), 0.1);
        assert!((w[&0].sum() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = FinetuneSchedule {
            steps: 10,
            ..FinetuneSchedule::default()
        };
        assert_eq!(s.lr_at(0.1, 0), 0.1);
        assert!((s.lr_at(0.1, 5) - 0.05).abs() < 1e-12);
    }
}
