use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ghnforge_tape::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cosine_lr, train_step, AdamW, TrainConfig};
use crate::archgraph::{compute_features, ArchGraph, GraphFeatures};
use crate::data::{Dataset, Sampler, Split};
use crate::error::{Error, Result};
use crate::ghn::GhnModel;

pub const METRICS_HEADER: [&str; 6] = ["step", "lr", "ce", "reg", "grad_norm", "wallclock"];
const RECENT_ROWS: usize = 256;
const DATA_SEED_SALT: u64 = 0x5eed_da7a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub reg: f64,
    pub grad_norm: f64,
    /// Seconds since the run started, summed across resumes.
    pub wallclock: f64,
}

/// Everything besides model and optimiser tensors needed to continue a run
/// exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Steps completed.
    pub step: usize,
    pub total_steps: usize,
    /// Digest of the architecture space the run was started on.
    pub space_digest: String,
    arch_rng: ChaCha8Rng,
    arch_order: Vec<usize>,
    arch_cursor: usize,
    sampler: Sampler,
    pub elapsed: f64,
    pub recent: VecDeque<MetricsRow>,
}

fn space_digest(graphs: &[ArchGraph]) -> String {
    let mut h = Sha256::new();
    for g in graphs {
        h.update(g.structure_key().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Drives training one step at a time.
pub struct Trainer<'a, T: Scalar> {
    model: GhnModel<T>,
    opt: AdamW<T>,
    run: TrainRun,
    graphs: &'a [ArchGraph],
    feats: Vec<GraphFeatures>,
    data: &'a Dataset,
    clock: Instant,
    clock_base: f64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: GhnModel<T>, graphs: &'a [ArchGraph], data: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if graphs.len() < cfg.meta_batch {
            return Err(Error::Config(format!(
                "the space has {} architectures, fewer than meta_batch {}",
                graphs.len(),
                cfg.meta_batch
            )));
        }
        let mut arch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut arch_order: Vec<usize> = (0..graphs.len()).collect();
        arch_order.shuffle(&mut arch_rng);
        let run = TrainRun {
            step: 0,
            total_steps: cfg.total_steps(graphs.len()),
            space_digest: space_digest(graphs),
            arch_rng,
            arch_order,
            arch_cursor: 0,
            sampler: Sampler::new(data.len(Split::Train), cfg.seed ^ DATA_SEED_SALT, cfg.augment),
            elapsed: 0.0,
            recent: VecDeque::new(),
            config: cfg,
        };
        Ok(Self::assemble(model, AdamW::new(run.config.weight_decay), run, graphs, data))
    }

    fn assemble(model: GhnModel<T>, opt: AdamW<T>, run: TrainRun, graphs: &'a [ArchGraph], data: &'a Dataset) -> Self {
        let max_dist = model.config().max_dist;
        let feats = graphs.iter().map(|g| compute_features(g, max_dist)).collect();
        Self {
            clock_base: run.elapsed,
            model,
            opt,
            run,
            graphs,
            feats,
            data,
            clock: Instant::now(),
        }
    }

    const MODEL_FILE: &'static str = "model.ghnm";
    const OPT_FILE: &'static str = "optimizer.bin";
    const RUN_FILE: &'static str = "run.json";

    /// Restores a run saved by [`Trainer::save_checkpoint`]. The space must
    /// be the one the run started on.
    pub fn resume(dir: &Path, graphs: &'a [ArchGraph], data: &'a Dataset) -> Result<Self> {
        let model = GhnModel::load(&dir.join(Self::MODEL_FILE))?;
        let bytes = fs::read(dir.join(Self::OPT_FILE))?;
        let opt = AdamW::read_from(&mut &bytes[..]).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(dir.join(Self::OPT_FILE), detail),
            other => other,
        })?;
        let text = fs::read_to_string(dir.join(Self::RUN_FILE))?;
        let run: TrainRun =
            serde_json::from_str(&text).map_err(|e| Error::format(dir.join(Self::RUN_FILE), e.to_string()))?;
        if run.space_digest != space_digest(graphs) {
            return Err(Error::Config(format!(
                "checkpoint {} was trained on a different architecture space",
                dir.display()
            )));
        }
        Ok(Self::assemble(model, opt, run, graphs, data))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        self.model.save(&tmp.join(Self::MODEL_FILE))?;
        let mut buf = Vec::new();
        self.opt.write_to(&mut buf)?;
        fs::write(tmp.join(Self::OPT_FILE), buf)?;
        let mut run = self.run.clone();
        run.elapsed = self.elapsed();
        fs::write(tmp.join(Self::RUN_FILE), serde_json::to_string_pretty(&run)?)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    fn elapsed(&self) -> f64 {
        self.clock_base + self.clock.elapsed().as_secs_f64()
    }

    pub fn model(&self) -> &GhnModel<T> {
        &self.model
    }

    pub fn into_model(self) -> GhnModel<T> {
        self.model
    }

    pub fn run(&self) -> &TrainRun {
        &self.run
    }

    pub fn is_done(&self) -> bool {
        self.run.step >= self.run.total_steps
    }

    fn next_archs(&mut self) -> Vec<usize> {
        let m = self.run.config.meta_batch;
        if self.run.arch_cursor + m > self.run.arch_order.len() {
            self.run.arch_order.shuffle(&mut self.run.arch_rng);
            self.run.arch_cursor = 0;
        }
        let c = self.run.arch_cursor;
        self.run.arch_cursor += m;
        self.run.arch_order[c..c + m].to_vec()
    }

    /// Takes one step. Sampling state advances only when the step succeeds,
    /// so a failed step can be retried from the same state.
    pub fn next_step(&mut self) -> Result<MetricsRow> {
        assert!(!self.is_done(), "training already finished");
        let saved = (
            self.run.arch_rng.clone(),
            self.run.arch_order.clone(),
            self.run.arch_cursor,
            self.run.sampler.clone(),
        );
        let ids = self.next_archs();
        let batch = self.run.sampler.next_batch::<T>(self.data, self.run.config.data_batch);
        let archs: Vec<_> = ids.iter().map(|&i| (&self.graphs[i], &self.feats[i])).collect();
        let lr = cosine_lr(self.run.config.lr, self.run.step, self.run.total_steps);
        match train_step(&mut self.model, &mut self.opt, &archs, &batch, &self.run.config, lr) {
            Ok(loss) => {
                let row = MetricsRow {
                    step: self.run.step,
                    lr,
                    ce: loss.ce,
                    reg: loss.reg,
                    grad_norm: loss.grad_norm,
                    wallclock: self.elapsed(),
                };
                self.run.step += 1;
                if self.run.recent.len() == RECENT_ROWS {
                    self.run.recent.pop_front();
                }
                self.run.recent.push_back(row);
                Ok(row)
            }
            Err(e) => {
                (self.run.arch_rng, self.run.arch_order, self.run.arch_cursor, self.run.sampler) = saved;
                Err(e)
            }
        }
    }

    /// Runs to completion. With an output directory, metric rows go to
    /// `metrics.csv` (rows at or after the current step from an earlier
    /// attempt are dropped), the latest checkpoint to `checkpoint/` and
    /// the final model to `model.ghnm`.
    pub fn run_to_end(&mut self, out: Option<&Path>) -> Result<Vec<MetricsRow>> {
        self.run_to_end_with(out, |_| {})
    }

    /// [`Trainer::run_to_end`] calling `on_step` after every step.
    pub fn run_to_end_with(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let mut writer = match out {
            Some(dir) => Some(MetricsWriter::open(&dir.join("metrics.csv"), self.run.step)?),
            None => None,
        };
        let every = self.run.config.checkpoint_every;
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.next_step()?;
            if let Some(w) = writer.as_mut() {
                w.push(&row)?;
            }
            on_step(&row);
            rows.push(row);
            if let Some(dir) = out {
                if every > 0 && self.run.step % every == 0 && !self.is_done() {
                    self.save_checkpoint(&dir.join("checkpoint"))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join("checkpoint"))?;
            self.model.save(&dir.join("model.ghnm"))?;
        }
        Ok(rows)
    }
}

struct MetricsWriter {
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    fn open(path: &PathBuf, from_step: usize) -> Result<Self> {
        let mut kept: Vec<MetricsRow> = Vec::new();
        if from_step > 0 && path.exists() {
            let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
            for row in r.deserialize::<MetricsRow>() {
                let row = row.map_err(|e| Error::format(path, e.to_string()))?;
                if row.step < from_step {
                    kept.push(row);
                }
            }
        }
        let mut inner = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        inner.write_record(METRICS_HEADER).map_err(csv_io)?;
        let mut w = Self { inner };
        for row in &kept {
            w.push(row)?;
        }
        Ok(w)
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner
            .write_record([
                row.step.to_string(),
                row.lr.to_string(),
                row.ce.to_string(),
                row.reg.to_string(),
                row.grad_norm.to_string(),
                format!("{:.3}", row.wallclock),
            ])
            .map_err(csv_io)?;
        self.inner.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Trains `model` on `graphs` for the configured number of epochs.
pub fn train<T: Scalar>(
    model: GhnModel<T>,
    graphs: &[ArchGraph],
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(GhnModel<T>, Vec<MetricsRow>)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut t = Trainer::new(model, graphs, data, cfg.clone())?;
    let rows = t.run_to_end(out)?;
    Ok((t.into_model(), rows))
}
