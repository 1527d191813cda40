use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ghnforge_tape::{lit, Scalar, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::{EdgeMode, GhnConfig};
use crate::archgraph::OpKind;
use crate::error::{Error, Result};
use crate::target_net::{read_scalars, read_u32, scalar_width, write_scalars};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EdgeParams {
    pub fw: Option<usize>,
    pub bw: Option<usize>,
    /// `w1 [2k, 2k]`, `b1 [2k]`, `w2 [k, 2k]`, `b2 [k]`.
    pub phi: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnParams {
    pub ln: [usize; 2],
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams {
    pub attn: Option<AttnParams>,
    pub ln: [usize; 2],
    /// `w1 [4d, d]`, `b1 [4d]`, `w2 [d, 4d]`, `b2 [d]`.
    pub mlp: [usize; 4],
}

/// Tensor positions of every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub op: usize,
    pub in_deg: Option<usize>,
    pub out_deg: Option<usize>,
    pub input_dist: Option<usize>,
    /// One shared set, one per layer, or none.
    pub edges: Vec<EdgeParams>,
    pub layers: Vec<LayerParams>,
    /// `w1 [dh * S^2, d]`, `b1 [dh * S^2]`, `w2 [(cd)^2, dh]`, `b2 [(cd)^2]`.
    pub dec: [usize; 4],
}

/// Trainable hypernetwork state plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GhnModel<T> {
    cfg: GhnConfig,
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
    pub(crate) layout: Layout,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
}

impl Builder {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let rng = &mut self.rng;
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || std * rng.sample::<f64, _>(StandardNormal));
        self.push(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, ArrayD::from_elem(IxDyn(shape), value))
    }

    fn push(&mut self, name: String, t: ArrayD<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

impl<T: Scalar> GhnModel<T> {
    /// Freshly initialised model. Only structural checks are made here, so a
    /// zero-layer model can be built for testing; use
    /// [`GhnConfig::validate`] on user input.
    pub fn new(cfg: GhnConfig) -> Self {
        assert!(cfg.hidden > 0 && cfg.heads > 0 && cfg.hidden % cfg.heads == 0, "hidden must be a multiple of heads");
        let (layout, names, tensors) = Self::allocate(&cfg);
        Self {
            cfg,
            names,
            tensors: tensors.into_iter().map(|t| t.mapv(lit)).collect(),
            layout,
        }
    }

    fn allocate(cfg: &GhnConfig) -> (Layout, Vec<String>, Vec<ArrayD<f64>>) {
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let d = cfg.hidden;
        let k = cfg.heads;
        let emb = 0.5;
        let op = b.normal("embed.op".into(), &[OpKind::COUNT, d], emb);
        let (in_deg, out_deg) = if cfg.use_centrality {
            (
                Some(b.normal("embed.in_degree".into(), &[cfg.max_deg + 1, d], emb)),
                Some(b.normal("embed.out_degree".into(), &[cfg.max_deg + 1, d], emb)),
            )
        } else {
            (None, None)
        };
        let input_dist = cfg
            .use_input_dist
            .then(|| b.normal("embed.input_dist".into(), &[cfg.max_dist + 2, d], emb));

        let mode = cfg.edge_mode();
        let edge_sets = match mode {
            EdgeMode::None => 0,
            _ if cfg.per_layer_bias => cfg.layers,
            _ => 1,
        };
        let mut edges = Vec::with_capacity(edge_sets);
        for e in 0..edge_sets {
            let prefix = if cfg.per_layer_bias {
                format!("layers.{e}.edge")
            } else {
                "edge".into()
            };
            let rows = cfg.max_dist + 2;
            let fw = cfg
                .use_fw_edges
                .then(|| b.normal(format!("{prefix}.fw"), &[rows, k], 1.0));
            let bw = cfg
                .use_bw_edges
                .then(|| b.normal(format!("{prefix}.bw"), &[rows, k], 1.0));
            let phi = (mode == EdgeMode::Ghn3).then(|| {
                [
                    b.normal(format!("{prefix}.phi.w1"), &[2 * k, 2 * k], (1.0 / k as f64).sqrt()),
                    b.fill(format!("{prefix}.phi.b1"), &[2 * k], 0.0),
                    b.normal(format!("{prefix}.phi.w2"), &[k, 2 * k], (0.5 / k as f64).sqrt()),
                    b.fill(format!("{prefix}.phi.b2"), &[k], 0.0),
                ]
            });
            edges.push(EdgeParams { fw, bw, phi });
        }

        let sd = (1.0 / d as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("layers.{l}");
                let attn = cfg.use_sa.then(|| AttnParams {
                    ln: [
                        b.fill(format!("{p}.attn_norm.gamma"), &[d], 1.0),
                        b.fill(format!("{p}.attn_norm.beta"), &[d], 0.0),
                    ],
                    wq: b.normal(format!("{p}.attn.wq"), &[d, d], sd),
                    wk: b.normal(format!("{p}.attn.wk"), &[d, d], sd),
                    wv: b.normal(format!("{p}.attn.wv"), &[d, d], sd),
                    wo: b.normal(format!("{p}.attn.wo"), &[d, d], sd),
                });
                LayerParams {
                    attn,
                    ln: [
                        b.fill(format!("{p}.mlp_norm.gamma"), &[d], 1.0),
                        b.fill(format!("{p}.mlp_norm.beta"), &[d], 0.0),
                    ],
                    mlp: [
                        b.normal(format!("{p}.mlp.w1"), &[4 * d, d], sd),
                        b.fill(format!("{p}.mlp.b1"), &[4 * d], 0.0),
                        b.normal(format!("{p}.mlp.w2"), &[d, 4 * d], (0.25 / d as f64).sqrt()),
                        b.fill(format!("{p}.mlp.b2"), &[d], 0.0),
                    ],
                }
            })
            .collect();

        let s2 = cfg.decoder_spatial * cfg.decoder_spatial;
        let dh = cfg.decoder_hidden();
        let cd = cfg.decoder_channels();
        let dec = [
            b.normal("decoder.w1".into(), &[dh * s2, d], sd),
            b.fill("decoder.b1".into(), &[dh * s2], 0.0),
            b.normal("decoder.w2".into(), &[cd * cd, dh], 0.1 / (dh as f64).sqrt()),
            b.fill("decoder.b2".into(), &[cd * cd], 0.0),
        ];
        let layout = Layout {
            op,
            in_deg,
            out_deg,
            input_dist,
            edges,
            layers,
            dec,
        };
        (layout, b.names, b.tensors)
    }

    pub fn config(&self) -> &GhnConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GhnModel<U> {
        GhnModel {
            cfg: self.cfg.clone(),
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| lit(v.to_f64().unwrap())))
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Places every tensor on `tape`, as leaves when `track` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, track: bool) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| if track { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"GHNM";
    const VERSION: u32 = 1;

    /// Versioned header with the element width (4 or 8 bytes), the
    /// configuration as JSON, then one `(name, rank, dims, payload)` record
    /// per tensor.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let width = scalar_width::<T>();
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&[width])?;
        let cfg = serde_json::to_vec(&self.cfg)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            write_scalars(w, t.iter(), width)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |d: String| Error::format("<model>", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("not a hypernetwork checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != Self::VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut width = [0u8; 1];
        r.read_exact(&mut width)?;
        let width = width[0];
        if width != 4 && width != 8 {
            return Err(bad(format!("unsupported element width {width}")));
        }
        let mut cfg = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut cfg)?;
        let cfg: GhnConfig = serde_json::from_slice(&cfg).map_err(|e| bad(e.to_string()))?;
        let mut model = Self::new(cfg);
        let count = read_u32(r)? as usize;
        if count != model.tensors.len() {
            return Err(bad(format!("expected {} tensors, found {count}", model.tensors.len())));
        }
        for i in 0..count {
            let mut name = vec![0u8; read_u32(r)? as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if name != model.names[i] || dims != model.tensors[i].shape() {
                return Err(bad(format!(
                    "record {i} is `{name}` {dims:?}, expected `{}` {:?}",
                    model.names[i],
                    model.tensors[i].shape()
                )));
            }
            let values = read_scalars::<T>(r, model.tensors[i].len(), width)?;
            model.tensors[i].iter_mut().zip(values).for_each(|(v, x)| *v = x);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut &bytes[..]).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::format(path, "truncated file"),
            other => other,
        })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GhnConfig {
        GhnConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            decoder_spatial: 4,
            ..GhnConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = GhnModel::<f32>::new(small());
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = GhnModel::<f32>::read_from(&mut &buf[..]).unwrap();
        assert_eq!(m, back);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn disabled_features_own_no_parameters() {
        let cfg = GhnConfig {
            use_centrality: false,
            use_input_dist: false,
            use_sa: false,
            ..small()
        };
        let m = GhnModel::<f32>::new(cfg);
        assert!(m.names().iter().all(|n| !n.contains("degree") && !n.contains("edge") && !n.contains("attn")));
    }

    #[test]
    fn per_layer_bias_duplicates_edge_parameters() {
        let cfg = GhnConfig {
            per_layer_bias: true,
            ..small()
        };
        let m = GhnModel::<f32>::new(cfg);
        assert!(m.tensor("layers.1.edge.phi.w1").is_some());
        assert!(m.tensor("edge.fw").is_none());
    }

    #[test]
    fn seeds_are_reproducible() {
        assert_eq!(GhnModel::<f64>::new(small()), GhnModel::<f64>::new(small()));
        let other = GhnConfig { seed: 1, ..small() };
        assert_ne!(GhnModel::<f64>::new(small()), GhnModel::<f64>::new(other));
    }
}
