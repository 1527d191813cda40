use std::rc::Rc;

use ghnforge_tape::{lit, Scalar, Tape, Var};
use ndarray::{Array2, Array3};

use super::config::EdgeMode;
use super::model::GhnModel;
use crate::archgraph::{ArchGraph, GraphFeatures, OpKind};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Final node features and the attention weights of every layer.
pub struct Encoded<'t, T: Scalar> {
    /// `[n, d]`.
    pub h: Var<'t, T>,
    /// Per layer, `[heads, n, n]` row-stochastic weights (empty without
    /// self-attention).
    pub attention: Vec<Rc<Array3<T>>>,
}

impl<T: Scalar> GhnModel<T> {
    fn check_features(&self, ops: &[OpKind], feat: &GraphFeatures) -> Result<()> {
        if feat.max_dist != self.config().max_dist {
            return Err(Error::Config(format!(
                "features were bucketed with max_dist {}, the model expects {}",
                feat.max_dist,
                self.config().max_dist
            )));
        }
        if ops.len() != feat.len() {
            return Err(Error::InvalidGraph("op list and features disagree on node count".into()));
        }
        Ok(())
    }

    /// Op embedding plus the enabled structural embeddings, `[n, d]`.
    pub fn embed_nodes<'t>(&self, b: &[Var<'t, T>], ops: &[OpKind], feat: &GraphFeatures) -> Var<'t, T> {
        let lay = &self.layout;
        let max_deg = self.config().max_deg;
        let clip = |v: &[usize], hi: usize| -> Vec<usize> { v.iter().map(|&x| x.min(hi)).collect() };
        let op_idx: Vec<usize> = ops.iter().map(|op| op.index()).collect();
        let mut terms = vec![b[lay.op].gather_rows(&op_idx)];
        if let Some(i) = lay.in_deg {
            terms.push(b[i].gather_rows(&clip(&feat.in_degree, max_deg)));
        }
        if let Some(i) = lay.out_deg {
            terms.push(b[i].gather_rows(&clip(&feat.out_degree, max_deg)));
        }
        if let Some(i) = lay.input_dist {
            terms.push(b[i].gather_rows(&clip(&feat.input_dist, feat.unreachable())));
        }
        Var::add_n(&terms)
    }

    /// Per-head additive attention bias `[k, n, n]` for `layer`, or `None`
    /// when structure is not injected into attention.
    pub fn attention_bias<'t>(&self, b: &[Var<'t, T>], feat: &GraphFeatures, layer: usize) -> Option<Var<'t, T>> {
        let set = if self.config().per_layer_bias { layer } else { 0 };
        let e = self.layout.edges.get(set)?;
        let n = feat.len();
        let k = self.config().heads;
        let fw_idx: Vec<usize> = feat.spd_fw.iter().copied().collect();
        let bw_idx: Vec<usize> = feat.spd_bw.iter().copied().collect();
        let pairs = match self.config().edge_mode() {
            EdgeMode::None => return None,
            EdgeMode::Graphormer => match (e.fw, e.bw) {
                (Some(fw), _) => b[fw].gather_rows(&fw_idx),
                (None, Some(bw)) => b[bw].gather_rows(&bw_idx),
                (None, None) => unreachable!("graphormer mode has a table"),
            },
            EdgeMode::Ghn3 => {
                let [w1, b1, w2, b2] = e.phi.expect("ghn3 mode has phi");
                let x = Var::concat(
                    &[
                        b[e.fw.unwrap()].gather_rows(&fw_idx),
                        b[e.bw.unwrap()].gather_rows(&bw_idx),
                    ],
                    1,
                );
                x.matmul_nt(b[w1]).add_row(b[b1]).relu().matmul_nt(b[w2]).add_row(b[b2])
            }
        };
        Some(pairs.t().reshape(&[k, n, n]))
    }

    /// Runs the embedding and every transformer block.
    ///
    /// Blocks are pre-norm: `h += Wo MSA(LN(h))` then
    /// `h += MLP(LN(h))`. Without self-attention only the MLP half remains.
    pub fn encode<'t>(&self, b: &[Var<'t, T>], ops: &[OpKind], feat: &GraphFeatures) -> Result<Encoded<'t, T>> {
        self.check_features(ops, feat)?;
        let cfg = self.config();
        let eps: T = lit(LN_EPS);
        let mut h = self.embed_nodes(b, ops, feat);
        let shared_bias = if cfg.per_layer_bias { None } else { self.attention_bias(b, feat, 0) };
        let mut attention = Vec::new();
        for (l, layer) in self.layout.layers.iter().enumerate() {
            if let Some(a) = &layer.attn {
                let x = h.layer_norm(b[a.ln[0]], b[a.ln[1]], eps);
                let bias = if cfg.per_layer_bias {
                    self.attention_bias(b, feat, l)
                } else {
                    shared_bias
                };
                let (out, probs) = Var::attention(
                    x.matmul_nt(b[a.wq]),
                    x.matmul_nt(b[a.wk]),
                    x.matmul_nt(b[a.wv]),
                    bias,
                    cfg.heads,
                );
                attention.push(probs);
                h = h.add(out.matmul_nt(b[a.wo]));
            }
            let [w1, b1, w2, b2] = layer.mlp;
            let x = h.layer_norm(b[layer.ln[0]], b[layer.ln[1]], eps);
            h = h.add(x.matmul_nt(b[w1]).add_row(b[b1]).gelu().matmul_nt(b[w2]).add_row(b[b2]));
            if h.value().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(l));
            }
        }
        Ok(Encoded { h, attention })
    }
}

/// Final node features `[n, d]` of `g` without recording gradients.
pub fn encoder_forward<T: Scalar>(g: &ArchGraph, feat: &GraphFeatures, model: &GhnModel<T>) -> Result<Array2<T>> {
    encode_ops(&g.ops(), feat, model).map(|(h, _)| h)
}

/// Node features and per-layer attention weights `[k, n, n]` for an
/// arbitrary op list and feature set.
pub fn encode_ops<T: Scalar>(
    ops: &[OpKind],
    feat: &GraphFeatures,
    model: &GhnModel<T>,
) -> Result<(Array2<T>, Vec<Array3<T>>)> {
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let enc = model.encode(&b, ops, feat)?;
    let n = ops.len();
    let h = enc.h.value().as_ref().clone().into_dimensionality().unwrap();
    debug_assert!(enc.attention.iter().all(|p| p.shape()[1..] == [n, n]));
    let att = enc.attention.iter().map(|p| p.as_ref().clone()).collect();
    Ok((h, att))
}
