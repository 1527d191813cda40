use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ghnforge::archgraph::{
    compute_features, read_space, sample_space, sample_space_excluding, space_stats, write_space, ArchGraph,
    ArchSpaceConfig,
};
use ghnforge::data::{Dataset, Split};
use ghnforge::evalkit::{
    ablation_grid, ablation_sweep, compare_inits, diversity_by_shape, eval_no_finetune, kendall_tau, transfer_eval,
    variance_probe, DiversityReport, MatchMode,
};
use ghnforge::ghn::{predict_params, GhnModel};
use ghnforge::target_net::{random_init, sgd_finetune, ParamSet, ParamSource};
use ghnforge::trainer::Trainer;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig};
use crate::manifest::{input_hash, Manifest};
use crate::{CliError, Command, Inputs};

type Model = GhnModel<f32>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn heldout_space(cfg: &ExperimentConfig) -> ArchSpaceConfig {
    ArchSpaceConfig {
        n_archs: cfg.heldout.n_archs,
        seed: cfg.heldout.seed,
        name_prefix: cfg.heldout.name_prefix.clone(),
        ..cfg.space.clone()
    }
}

fn load_data(dc: &DataConfig, dir: Option<&Path>) -> Result<Dataset, CliError> {
    Ok(match dir.or(dc.dir.as_deref()) {
        Some(d) => Dataset::load(d)?,
        None => Dataset::synthetic(&dc.synthetic)?,
    })
}

/// Training and held-out architectures plus the dataset, from input
/// directories where given and regenerated otherwise.
struct World {
    train: Vec<ArchGraph>,
    heldout: Vec<ArchGraph>,
    data: Dataset,
}

fn world(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<World, CliError> {
    let train = match &inputs.space {
        Some(d) => read_space(d)?.1,
        None => sample_space(&cfg.space)?,
    };
    let heldout = match &inputs.heldout {
        Some(d) => read_space(d)?.1,
        None => sample_space_excluding(&heldout_space(cfg), &train)?,
    };
    Ok(World {
        train,
        heldout,
        data: load_data(&cfg.data, inputs.data.as_deref())?,
    })
}

fn input_hashes(inputs: &Inputs, extra: &[(&str, &Path)]) -> Result<BTreeMap<String, String>, CliError> {
    let mut m = BTreeMap::new();
    let dirs = [("space", &inputs.space), ("heldout", &inputs.heldout), ("data", &inputs.data)];
    for (name, p) in dirs {
        if let Some(p) = p {
            m.insert(name.to_string(), input_hash(p)?);
        }
    }
    for (name, p) in extra {
        m.insert(name.to_string(), input_hash(p)?);
    }
    Ok(m)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(Model::load(path)?)
}

pub fn dispatch(cmd: &Command, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cmd.common().out;
    match cmd {
        Command::GenSpace { no_data, .. } => {
            Manifest::new(cmd.name(), cfg, BTreeMap::new()).write(out)?;
            gen_space(cfg, out, !no_data)
        }
        Command::Train { inputs, resume, .. } => {
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &[])?).write(out)?;
            train(cfg, inputs, out, *resume)
        }
        Command::Predict { inputs, model, archs, .. } => {
            let mut extra: Vec<(&str, &Path)> = vec![("model", model)];
            let names: Vec<String> = archs.iter().map(|a| format!("arch:{}", a.display())).collect();
            extra.extend(names.iter().map(String::as_str).zip(archs.iter().map(|a| a.as_path())));
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &extra)?).write(out)?;
            predict(cfg, inputs, model, archs, out)
        }
        Command::Eval { inputs, model, .. } => {
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &[("model", model)])?).write(out)?;
            eval(cfg, inputs, model, out)
        }
        Command::Finetune { inputs, model, transfer, .. } => {
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &[("model", model)])?).write(out)?;
            finetune(cfg, inputs, model, *transfer, out)
        }
        Command::Analyze {
            inputs,
            model,
            reference,
            diversity,
            variance,
            tau,
            ..
        } => {
            if !(*diversity || *variance || *tau) {
                return Err(CliError::Config("choose at least one of --diversity, --variance, --tau".into()));
            }
            let mut extra: Vec<(&str, &Path)> = vec![("model", model)];
            if let Some(r) = reference {
                extra.push(("reference", r));
            }
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &extra)?).write(out)?;
            let w = world(cfg, inputs)?;
            let m = load_model(model)?;
            if *diversity {
                analyze_diversity(cfg, &w, &m, out)?;
            }
            if *variance {
                let r = reference.as_deref().map(load_model).transpose()?;
                analyze_variance(cfg, &w, &m, r.as_ref(), out)?;
            }
            if *tau {
                analyze_tau(cfg, &w, &m, out)?;
            }
            Ok(())
        }
        Command::Ablate { inputs, .. } => {
            Manifest::new(cmd.name(), cfg, input_hashes(inputs, &[])?).write(out)?;
            ablate(cfg, inputs, out)
        }
    }
}

fn gen_space(cfg: &ExperimentConfig, out: &Path, with_data: bool) -> Result<(), CliError> {
    let train = sample_space(&cfg.space)?;
    let held_cfg = heldout_space(cfg);
    let heldout = sample_space_excluding(&held_cfg, &train)?;
    let manifest = write_space(&out.join("space"), &cfg.space, &train)?;
    write_space(&out.join("heldout"), &held_cfg, &heldout)?;
    eprintln!(
        "{} training archs ({:.1} nodes on average), {} held out",
        train.len(),
        manifest.stats.mean_nodes,
        heldout.len()
    );
    let held_stats = space_stats(&heldout);
    write_json(
        &out.join("stats.json"),
        &serde_json::json!({ "train": manifest.stats, "heldout": held_stats }),
    )?;
    if with_data && cfg.data.dir.is_none() {
        let data = Dataset::synthetic(&cfg.data.synthetic)?;
        data.save(&out.join("data"))?;
        eprintln!("dataset {} written ({})", data.meta().name, &data.meta().sha256[..12]);
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path, resume: bool) -> Result<(), CliError> {
    let graphs = match &inputs.space {
        Some(d) => read_space(d)?.1,
        None => sample_space(&cfg.space)?,
    };
    let data = load_data(&cfg.data, inputs.data.as_deref())?;
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume && ckpt.is_dir() {
        let t = Trainer::<f32>::resume(&ckpt, &graphs, &data)?;
        if t.run().config != cfg.train {
            eprintln!("warning: resuming with the checkpoint's training settings, not the config file's");
        }
        eprintln!("resuming at step {}", t.run().step);
        t
    } else {
        Trainer::new(Model::new(cfg.ghn.clone()), &graphs, &data, cfg.train.clone())?
    };
    let total = trainer.run().total_steps;
    eprintln!(
        "training {} parameters on {} archs for {} steps",
        trainer.model().num_params(),
        graphs.len(),
        total
    );
    let every = (total / 20).max(1);
    let rows = trainer.run_to_end_with(Some(out), |r| {
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            eprintln!(
                "step {:>6}/{total}  lr {:.2e}  ce {:.4}  reg {:.4}  |g| {:.3}  {:.0}s",
                r.step + 1,
                r.lr,
                r.ce,
                r.reg,
                r.grad_norm,
                r.wallclock
            );
        }
    })?;
    if let Some(last) = rows.last() {
        eprintln!("done: final ce {:.4}", last.ce);
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    arch: String,
    nodes: usize,
    num_params: usize,
    predicted_tensors: usize,
    fallback_tensors: usize,
    mean_abs: f64,
    sha256: String,
    file: String,
    seconds: f64,
}

fn predict(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
    model: &Path,
    archs: &[std::path::PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    let m = load_model(model)?;
    let graphs = if archs.is_empty() {
        world(cfg, inputs)?.heldout
    } else {
        archs.iter().map(|a| ArchGraph::load(a)).collect::<Result<Vec<_>, _>>()?
    };
    let dir = out.join("params");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut rows = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let t = Instant::now();
        let p = predict_params(g, &compute_features(g, m.config().max_dist), &m)?;
        let seconds = t.elapsed().as_secs_f64();
        let file = format!("{}.ghnp", g.name());
        p.params.save(&dir.join(&file))?;
        let predicted = p.slot_source.values().filter(|&&s| s == ParamSource::Predicted).count();
        rows.push(PredictionRow {
            arch: g.name().into(),
            nodes: g.len(),
            num_params: p.params.num_params(),
            predicted_tensors: predicted,
            fallback_tensors: p.slot_source.len() - predicted,
            mean_abs: p.params.mean_abs(),
            sha256: p.params.digest(|_| true),
            file: format!("params/{file}"),
            seconds,
        });
        eprintln!("{}: {} parameters in {:.3}s", g.name(), p.params.num_params(), seconds);
    }
    write_json(&out.join("predictions.json"), &rows)
}

fn eval(cfg: &ExperimentConfig, inputs: &Inputs, model: &Path, out: &Path) -> Result<(), CliError> {
    let w = world(cfg, inputs)?;
    let m = load_model(model)?;
    let report = eval_no_finetune(&m, &w.heldout, &w.data, cfg.eval);
    report.write_csv(&out.join("no_finetune.csv"))?;
    report.write_json(&out.join("no_finetune.json"))?;
    eprintln!(
        "no fine-tuning: mean {:.2}% (std {:.2}) over {} archs, {} failed",
        report.all.mean, report.all.std, report.all.count, report.failures
    );
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, inputs: &Inputs, model: &Path, transfer: bool, out: &Path) -> Result<(), CliError> {
    let w = world(cfg, inputs)?;
    let m = load_model(model)?;
    if transfer {
        let dst = load_data(&cfg.transfer.data, None)?;
        let (report, ids) = transfer_eval(&m, &w.heldout, &w.data, &dst, &cfg.transfer.protocol)?;
        report.write_csv(&out.join("transfer.csv"))?;
        report.write_json(&out.join("transfer.json"))?;
        write_json(&out.join("transfer_subset.json"), &ids)?;
        eprintln!("transfer: mean {:.2}% over {} archs", report.all.mean, report.all.count);
        return Ok(());
    }
    let c = compare_inits(&m, &w.heldout, &w.data, &cfg.finetune.schedule, cfg.finetune.beta)?;
    c.predicted.write_csv(&out.join("predicted.csv"))?;
    c.random.write_csv(&out.join("random.csv"))?;
    write_json(&out.join("comparison.json"), &c)?;
    eprintln!(
        "after {} steps: predicted {:.2}%, random {:.2}%, wins {:.0}%, avg gain {:+.2}",
        cfg.finetune.schedule.steps,
        c.predicted.all.mean,
        c.random.all.mean,
        100.0 * c.win_rate,
        c.avg_gain
    );
    Ok(())
}

fn predictions(m: &Model, graphs: &[ArchGraph]) -> Result<Vec<ParamSet<f32>>, CliError> {
    graphs
        .iter()
        .map(|g| Ok(predict_params(g, &compute_features(g, m.config().max_dist), m)?.params))
        .collect()
}

fn analyze_diversity(cfg: &ExperimentConfig, w: &World, m: &Model, out: &Path) -> Result<(), CliError> {
    let predicted = predictions(m, &w.heldout)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let random: Vec<ParamSet<f32>> = w.heldout.iter().map(|g| random_init(g, &mut rng)).collect();
    let mut result: BTreeMap<&str, BTreeMap<&str, Vec<DiversityReport>>> = BTreeMap::new();
    for (label, sets) in [("predicted", &predicted), ("random", &random)] {
        for (mode, name) in [(MatchMode::Direct, "direct"), (MatchMode::Hungarian, "hungarian")] {
            result.entry(label).or_default().insert(name, diversity_by_shape(sets, mode)?);
        }
    }
    write_json(&out.join("diversity.json"), &result)?;
    eprintln!("diversity written for {} shape groups", result["predicted"]["direct"].len());
    Ok(())
}

fn analyze_variance(
    cfg: &ExperimentConfig,
    w: &World,
    m: &Model,
    reference: Option<&Model>,
    out: &Path,
) -> Result<(), CliError> {
    let dir = out.join("variance");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let batch = w.data.head::<f32>(Split::Val, cfg.analyze.probe_batch);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = String::from("arch\trandom\tpredicted");
    if reference.is_some() {
        summary.push_str("\treference");
    }
    summary.push('\n');
    for g in &w.heldout {
        let rand: ParamSet<f32> = random_init(g, &mut rng);
        let pred = predictions(m, std::slice::from_ref(g))?.remove(0);
        let refp = reference.map(|r| predictions(r, std::slice::from_ref(g))).transpose()?;
        let mut inits = vec![("random", &rand), ("predicted", &pred)];
        if let Some(r) = &refp {
            inits.push(("reference", &r[0]));
        }
        let probe = variance_probe(g, &inits, &batch)?;
        probe.write_tsv(&dir.join(format!("{}.tsv", g.name())))?;
        summary.push_str(g.name());
        for (label, _) in &inits {
            summary.push_str(&format!("\t{}", probe.median(label).unwrap_or(f64::NAN)));
        }
        summary.push('\n');
    }
    let path = out.join("variance_summary.tsv");
    fs::write(&path, summary).map_err(|e| io_err(&path, e))?;
    eprintln!("variance probes written for {} archs", w.heldout.len());
    Ok(())
}

#[derive(Serialize)]
struct TauReport {
    tau: f64,
    archs: Vec<String>,
    predicted: Vec<f64>,
    trained: Vec<f64>,
    trained_steps: usize,
}

fn analyze_tau(cfg: &ExperimentConfig, w: &World, m: &Model, out: &Path) -> Result<(), CliError> {
    let report = eval_no_finetune(m, &w.heldout, &w.data, cfg.eval);
    let sched = &cfg.finetune.schedule;
    let trained: Vec<Result<f64, CliError>> = w
        .heldout
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ i as u64);
            let p: ParamSet<f32> = random_init(g, &mut rng);
            Ok(sgd_finetune(g, &p, &w.data, sched)?.accuracy)
        })
        .collect();
    let mut r = TauReport {
        tau: f64::NAN,
        archs: Vec::new(),
        predicted: Vec::new(),
        trained: Vec::new(),
        trained_steps: sched.steps,
    };
    for ((g, row), t) in w.heldout.iter().zip(&report.rows).zip(trained) {
        match (row.accuracy, t) {
            (Some(a), Ok(b)) => {
                r.archs.push(g.name().into());
                r.predicted.push(a);
                r.trained.push(b);
            }
            (_, Err(e)) => eprintln!("{}: skipped, {e}", g.name()),
            (None, _) => eprintln!("{}: skipped, {}", g.name(), row.error.as_deref().unwrap_or("no accuracy")),
        }
    }
    r.tau = kendall_tau(&r.predicted, &r.trained)?;
    write_json(&out.join("tau.json"), &r)?;
    eprintln!("kendall tau {:.3} over {} archs", r.tau, r.archs.len());
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, inputs: &Inputs, out: &Path) -> Result<(), CliError> {
    let w = world(cfg, inputs)?;
    let regs: Vec<(f64, f64)> = cfg.ablate.regs.iter().map(|r| (r[0], r[1])).collect();
    let cells = ablation_grid(&cfg.ablate.variants, &regs);
    eprintln!("{} cells x {} seeds", cells.len(), cfg.ablate.seeds.len());
    let table = ablation_sweep(
        &w.train,
        &w.heldout,
        &w.data,
        &cfg.ghn,
        &cfg.train,
        &cells,
        &cfg.ablate.seeds,
        cfg.eval,
        |row, _| match (&row.accuracy, &row.error) {
            (Some(a), _) => eprintln!("{} seed {}: {:.2}%", row.cell.label(), row.seed, a.mean),
            (None, e) => eprintln!("{} seed {}: failed, {}", row.cell.label(), row.seed, e.as_deref().unwrap_or("")),
        },
    );
    table.write_csv(&out.join("ablation.csv"))?;
    let summary: Vec<_> = cells
        .iter()
        .map(|c| serde_json::json!({ "cell": c, "label": c.label(), "accuracy": table.summary(c) }))
        .collect();
    write_json(&out.join("ablation.json"), &serde_json::json!({ "rows": table.rows, "summary": summary }))
}
