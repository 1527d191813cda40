use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::shortest_paths;
use super::graph::{build_graph, ArchGraph, ArchSpec};
use super::op::{NodeAttrs, OpKind};
use crate::error::{Error, Result};

/// Controls for the random architecture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpaceConfig {
    pub n_archs: usize,
    /// Inclusive range for the number of blocks after the stem.
    pub depth: [usize; 2],
    /// Inclusive range for block widths.
    pub channels: [usize; 2],
    pub residual_p: f64,
    pub concat_p: f64,
    pub activations: Vec<OpKind>,
    pub bn_p: f64,
    /// Probability of a 2x2 pooling layer after a block.
    pub pool_p: f64,
    /// Probability of a hidden linear layer before the classifier.
    pub linear_p: f64,
    pub kernels: Vec<usize>,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub name_prefix: String,
    pub seed: u64,
}

impl Default for ArchSpaceConfig {
    fn default() -> Self {
        Self {
            n_archs: 100,
            depth: [2, 5],
            channels: [8, 32],
            residual_p: 0.4,
            concat_p: 0.15,
            activations: vec![OpKind::Relu, OpKind::Silu],
            bn_p: 0.9,
            pool_p: 0.3,
            linear_p: 0.2,
            kernels: vec![1, 3, 5],
            image_size: 32,
            in_channels: 3,
            num_classes: 10,
            name_prefix: "arch".into(),
            seed: 0,
        }
    }
}

impl ArchSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_archs == 0 {
            return bad("n_archs must be positive".into());
        }
        for (name, [lo, hi]) in [("depth", self.depth), ("channels", self.channels)] {
            if lo > hi || lo == 0 {
                return bad(format!("{name} range [{lo}, {hi}] is empty or starts at 0"));
            }
        }
        for (name, p) in [
            ("residual_p", self.residual_p),
            ("concat_p", self.concat_p),
            ("bn_p", self.bn_p),
            ("pool_p", self.pool_p),
            ("linear_p", self.linear_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.activations.is_empty() {
            return bad("activations must not be empty".into());
        }
        if let Some(op) = self
            .activations
            .iter()
            .find(|op| !matches!(op, OpKind::Relu | OpKind::Silu))
        {
            return bad(format!("`{op}` is not an activation"));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|&k| k % 2 == 0 || k > 15) {
            return bad("kernels must be a non-empty list of odd sizes below 16".into());
        }
        if self.image_size < 4 || self.in_channels == 0 || self.num_classes < 2 {
            return bad("image_size >= 4, in_channels >= 1 and num_classes >= 2 are required".into());
        }
        Ok(())
    }
}

/// Table-2 style summary of a space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub n_archs: usize,
    pub mean_nodes: f64,
    pub mean_params: f64,
    /// Mean over graphs of `2|E| / |V|`.
    pub mean_degree: f64,
    /// Mean over graphs of the average directed shortest-path length between
    /// connected ordered pairs.
    pub mean_path: f64,
}

pub fn space_stats(graphs: &[ArchGraph]) -> SpaceStats {
    let n = graphs.len() as f64;
    let mut nodes = 0.0;
    let mut params = 0.0;
    let mut degree = 0.0;
    let mut path = 0.0;
    for g in graphs {
        nodes += g.len() as f64;
        params += g.num_params() as f64;
        degree += 2.0 * g.edges().len() as f64 / g.len() as f64;
        let (total, pairs) = shortest_paths(g.len(), g.edges())
            .iter()
            .flatten()
            .flatten()
            .filter(|&&d| d > 0)
            .fold((0usize, 0usize), |(t, c), &d| (t + d, c + 1));
        path += total as f64 / pairs.max(1) as f64;
    }
    SpaceStats {
        n_archs: graphs.len(),
        mean_nodes: nodes / n,
        mean_params: params / n,
        mean_degree: degree / n,
        mean_path: path / n,
    }
}

/// Samples `cfg.n_archs` distinct architectures.
pub fn sample_space(cfg: &ArchSpaceConfig) -> Result<Vec<ArchGraph>> {
    sample_space_excluding(cfg, &[])
}

/// Like [`sample_space`], additionally rejecting any architecture that is
/// structurally equal to one in `exclude`.
pub fn sample_space_excluding(cfg: &ArchSpaceConfig, exclude: &[ArchGraph]) -> Result<Vec<ArchGraph>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen: HashSet<String> = exclude.iter().map(ArchGraph::structure_key).collect();
    let mut out = Vec::with_capacity(cfg.n_archs);
    let max_attempts = 50 * cfg.n_archs + 100;
    let mut attempts = 0;
    while out.len() < cfg.n_archs {
        if attempts == max_attempts {
            return Err(Error::GenerationExhausted {
                wanted: cfg.n_archs,
                got: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let name = format!("{}_{:04}", cfg.name_prefix, out.len());
        let g = build_graph(&generate(cfg, &mut rng, name))?;
        if seen.insert(g.structure_key()) {
            out.push(g);
        }
    }
    Ok(out)
}

fn generate(cfg: &ArchSpaceConfig, rng: &mut ChaCha8Rng, name: String) -> ArchSpec {
    let [c_lo, c_hi] = cfg.channels;
    let act = *cfg.activations.choose(rng).unwrap();
    let use_bn = rng.random_bool(cfg.bn_p);
    let depth = rng.random_range(cfg.depth[0]..=cfg.depth[1]);

    let mut s = ArchSpec::new(name);
    let conv = |s: &mut ArchSpec, x: usize, c: usize, k: usize, stride: usize, act_after: bool| {
        let mut y = s.add(OpKind::Conv2d, NodeAttrs::conv(c, k, stride), &[x]);
        if use_bn {
            y = s.add_bn(y);
        }
        if act_after {
            y = s.add(act, NodeAttrs::default(), &[y]);
        }
        y
    };

    let mut x = s.add(OpKind::Input, NodeAttrs::input(cfg.in_channels, cfg.image_size), &[]);
    let mut spatial = cfg.image_size;
    let stem_stride = if spatial >= 16 { 2 } else { 1 };
    let mut c = rng.random_range(c_lo..=c_hi);
    x = conv(&mut s, x, c, 3, stem_stride, true);
    spatial = spatial.div_ceil(stem_stride);

    for _ in 0..depth {
        let c_out = if rng.random_bool(0.4) {
            rng.random_range(c_lo..=c_hi)
        } else {
            c
        };
        let mut k = || *cfg.kernels.choose(rng).unwrap();
        let (k1, k2) = (k(), k());
        let r: f64 = rng.random();
        x = if r < cfg.residual_p {
            let h = conv(&mut s, x, c_out, k1, 1, true);
            let h = conv(&mut s, h, c_out, k2, 1, false);
            let skip = if c_out != c { conv(&mut s, x, c_out, 1, 1, false) } else { x };
            let j = s.add(OpKind::Add, NodeAttrs::default(), &[h, skip]);
            s.add(act, NodeAttrs::default(), &[j])
        } else if r < cfg.residual_p + cfg.concat_p && c_out >= 2 {
            let half = c_out / 2;
            let a = conv(&mut s, x, half, k1, 1, true);
            let b = conv(&mut s, x, c_out - half, k2, 1, true);
            s.add(OpKind::Concat, NodeAttrs::default(), &[a, b])
        } else {
            conv(&mut s, x, c_out, k1, 1, true)
        };
        c = c_out;
        if spatial >= 4 && rng.random_bool(cfg.pool_p) {
            let op = if rng.random_bool(0.5) { OpKind::MaxPool } else { OpKind::AvgPool };
            x = s.add(op, NodeAttrs::pool(2, 2), &[x]);
            spatial /= 2;
        }
    }

    x = s.add(OpKind::GlobalAvgPool, NodeAttrs::default(), &[x]);
    if rng.random_bool(cfg.linear_p) {
        let hidden = rng.random_range(c_lo..=c_hi);
        x = s.add(OpKind::Linear, NodeAttrs::channels(hidden), &[x]);
        if use_bn {
            x = s.add_bn(x);
        }
        x = s.add(act, NodeAttrs::default(), &[x]);
    }
    s.add(OpKind::ClassifierHead, NodeAttrs::channels(cfg.num_classes), &[x]);
    s
}

/// Contents of `space.json` in a space directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceManifest {
    pub config: ArchSpaceConfig,
    pub stats: SpaceStats,
    /// Graph files relative to the manifest.
    pub graphs: Vec<String>,
}

pub const SPACE_MANIFEST: &str = "space.json";

/// Writes one JSON file per graph plus the manifest.
pub fn write_space(dir: &Path, cfg: &ArchSpaceConfig, graphs: &[ArchGraph]) -> Result<SpaceManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(graphs.len());
    for g in graphs {
        let file = format!("{}.json", g.name());
        g.save(&dir.join(&file))?;
        files.push(file);
    }
    let manifest = SpaceManifest {
        config: cfg.clone(),
        stats: space_stats(graphs),
        graphs: files,
    };
    fs::write(dir.join(SPACE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_space(dir: &Path) -> Result<(SpaceManifest, Vec<ArchGraph>)> {
    let path = dir.join(SPACE_MANIFEST);
    let text = fs::read_to_string(&path)?;
    let manifest: SpaceManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let graphs = manifest
        .graphs
        .iter()
        .map(|f| ArchGraph::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, graphs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_cfg() -> ArchSpaceConfig {
        ArchSpaceConfig {
            n_archs: 1,
            depth: [1, 1],
            residual_p: 0.0,
            concat_p: 0.0,
            ..ArchSpaceConfig::default()
        }
    }

    #[test]
    fn degenerate_range_gives_a_chain() {
        let gs = sample_space(&chain_cfg()).unwrap();
        let g = &gs[0];
        assert!((0..g.len()).all(|v| g.preds(v).len() <= 1 && g.succs(v).len() <= 1));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ArchSpaceConfig {
            n_archs: 20,
            seed: 3,
            ..ArchSpaceConfig::default()
        };
        let a: Vec<_> = sample_space(&cfg).unwrap().iter().map(ArchGraph::to_json).collect();
        let b: Vec<_> = sample_space(&cfg).unwrap().iter().map(ArchGraph::to_json).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_space_is_exhausted() {
        let cfg = ArchSpaceConfig {
            n_archs: 50,
            channels: [4, 4],
            kernels: vec![3],
            activations: vec![OpKind::Relu],
            bn_p: 1.0,
            pool_p: 0.0,
            linear_p: 0.0,
            ..chain_cfg()
        };
        assert!(matches!(
            sample_space(&cfg),
            Err(Error::GenerationExhausted { got: 1, .. })
        ));
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let cfg = ArchSpaceConfig {
            bn_p: 1.5,
            ..ArchSpaceConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn held_out_space_is_disjoint() {
        let train = sample_space(&ArchSpaceConfig {
            n_archs: 30,
            ..ArchSpaceConfig::default()
        })
        .unwrap();
        let held = sample_space_excluding(
            &ArchSpaceConfig {
                n_archs: 30,
                seed: 0,
                ..ArchSpaceConfig::default()
            },
            &train,
        )
        .unwrap();
        let keys: HashSet<_> = train.iter().map(ArchGraph::structure_key).collect();
        assert!(held.iter().all(|g| !keys.contains(&g.structure_key())));
    }
}
