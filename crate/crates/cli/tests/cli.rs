use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ghnforge_cli::{run, Manifest};

const SMOKE: &str = r#"
seed = 5

[space]
n_archs = 8
depth = [1, 2]
channels = [4, 8]
kernels = [1, 3]
image_size = 8

[heldout]
n_archs = 3

[data.synthetic]
n_train = 128
n_val = 64
size = 8

[ghn]
preset = "T"
layers = 1
hidden = 8
heads = 2
decoder_spatial = 3

[train]
epochs = 2
meta_batch = 2
data_batch = 16
checkpoint_every = 2

[eval]
batch = 64

[finetune.schedule]
lrs = [0.05]
steps = 4
batch_size = 16

[transfer.protocol]
few_shot = 32

[transfer.protocol.target]
lrs = [0.05]
steps = 3
batch_size = 16

[transfer.data.synthetic]
num_classes = 5
n_train = 64
n_val = 32
size = 8

[analyze]
probe_batch = 16

[ablate]
variants = ["full", "mlp_only"]
regs = [[3e-5, 0.01]]
seeds = [0]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ghnforge"))
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).env_remove("GHNFORGE_SEED").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.toml");
    fs::write(&p, SMOKE).unwrap();
    p
}

fn ok(code: i32) {
    assert_eq!(code, 0);
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let out = exec(&["train", "--config", "x.toml", "--out", "o", "--bogus"]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    let out = exec(&["frobnicate"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepocs = 3\n").unwrap();
    let out = exec(&["gen-space", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epocs"));

    fs::write(&cfg, "[train]\nmeta_batch = 0\n").unwrap();
    let out = exec(&["gen-space", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = exec(&["gen-space", "-c", s(&dir.path().join("absent.toml")), "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    let cfg = smoke_config(dir.path());
    let model = dir.path().join("none.ghnm");
    let out = exec(&["eval", "-c", s(&cfg), "-o", s(&dir.path().join("e")), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn seed_env_overrides_and_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let gen = |out: &str, seed: Option<&str>| {
        let mut c = bin();
        c.args(["gen-space", "--no-data", "-c", s(&cfg), "-o", s(&dir.path().join(out))]);
        match seed {
            Some(v) => c.env("GHNFORGE_SEED", v),
            None => c.env_remove("GHNFORGE_SEED"),
        };
        assert_eq!(c.output().unwrap().status.code(), Some(0));
        Manifest::read(&dir.path().join(out)).unwrap()
    };
    let a = gen("a", None);
    let b = gen("b", None);
    let c = gen("c", Some("9"));
    assert_eq!(a.config_sha256, b.config_sha256);
    assert_eq!((a.seed, c.seed, c.config.train.seed), (5, 9, 9));
    assert_ne!(a.config_sha256, c.config_sha256);
    let space = |o: &str| fs::read(dir.path().join(o).join("space/space.json")).unwrap();
    assert_eq!(space("a"), space("c"));
}

#[test]
fn smoke_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = smoke_config(d);
    let c = s(&cfg);
    let gen = d.join("gen");
    ok(run(["ghnforge", "gen-space", "-c", c, "-o", s(&gen)]));
    for f in ["manifest.json", "space/space.json", "heldout/space.json", "data/manifest.json", "stats.json"] {
        assert!(gen.join(f).exists(), "{f}");
    }
    let (sp, ho, da) = (gen.join("space"), gen.join("heldout"), gen.join("data"));
    let inputs = ["--space", s(&sp), "--heldout", s(&ho), "--data", s(&da)];
    let with = |cmd: &[&str], extra: &[&str]| -> Vec<String> {
        ["ghnforge"].iter().chain(cmd).chain(&["-c", c]).chain(&inputs).chain(extra).map(|x| x.to_string()).collect()
    };

    let tr = d.join("train");
    ok(run(with(&["train", "-o", s(&tr)], &["--threads", "1"])));
    let csv = fs::read_to_string(tr.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let model = tr.join("model.ghnm");
    assert!(model.exists() && tr.join("checkpoint/run.json").exists());
    let m = Manifest::read(&tr).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.inputs.len(), 3);
    ok(run(with(&["train", "-o", s(&tr)], &["--resume"])));
    assert_eq!(fs::read_to_string(tr.join("metrics.csv")).unwrap().lines().count(), csv.lines().count());

    let mdl = s(&model);
    let pr = d.join("predict");
    ok(run(with(&["predict", "-o", s(&pr)], &["--model", mdl])));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(pr.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    let first = rows[0]["file"].as_str().unwrap();
    assert!(pr.join(first).exists());

    let arch = gen.join("heldout").join(format!("{}.json", rows[0]["arch"].as_str().unwrap()));
    let one = d.join("predict_one");
    ok(run(with(&["predict", "-o", s(&one)], &["--model", mdl, "--arch", s(&arch)])));
    let again: serde_json::Value = serde_json::from_str(&fs::read_to_string(one.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(again[0]["sha256"], rows[0]["sha256"]);

    let ev = d.join("eval");
    ok(run(with(&["eval", "-o", s(&ev)], &["--model", mdl])));
    assert!(ev.join("no_finetune.csv").exists() && ev.join("no_finetune.json").exists());

    let ft = d.join("finetune");
    ok(run(with(&["finetune", "-o", s(&ft)], &["--model", mdl])));
    let cmp: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["pairs"], 3);
    ok(run(with(&["finetune", "-o", s(&ft)], &["--model", mdl, "--transfer"])));
    assert!(ft.join("transfer.csv").exists() && ft.join("transfer_subset.json").exists());

    let an = d.join("analyze");
    assert_eq!(run(with(&["analyze", "-o", s(&an)], &["--model", mdl])), 2);
    ok(run(with(
        &["analyze", "-o", s(&an)],
        &["--model", mdl, "--reference", mdl, "--diversity", "--variance", "--tau"],
    )));
    for f in ["diversity.json", "variance_summary.tsv", "tau.json"] {
        assert!(an.join(f).exists(), "{f}");
    }
    let summary = fs::read_to_string(an.join("variance_summary.tsv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[2], row[3], "the same model probed twice");

    let ab = d.join("ablate");
    ok(run(with(&["ablate", "-o", s(&ab)], &[])));
    let table = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2);
}

#[test]
fn reruns_are_identical_apart_from_wallclock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let train = |o: &str| {
        let out = dir.path().join(o);
        ok(run(["ghnforge", "train", "-c", s(&cfg), "-o", s(&out)]));
        out
    };
    let (a, b) = (train("a"), train("b"));
    let strip = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(fs::read(a.join("model.ghnm")).unwrap(), fs::read(b.join("model.ghnm")).unwrap());
    let (ma, mb) = (Manifest::read(&a).unwrap(), Manifest::read(&b).unwrap());
    assert_eq!((ma.config_sha256, ma.git_hash), (mb.config_sha256, mb.git_hash));
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ghnforge_cli::ExperimentConfig::load(&path).unwrap().resolve(None).unwrap();
            n += 1;
        }
    }
    assert!(n >= 2);
}
