use std::collections::BTreeMap;
use std::rc::Rc;

use ghnforge_tape::{Scalar, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::materialize::source_coords;
use super::model::GhnModel;
use crate::archgraph::{ArchGraph, BnRole, GraphFeatures};
use crate::error::Result;
use crate::target_net::{init_tensor, ParamSet, ParamSource};

/// Parameters predicted for one architecture plus the origin of each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedParams<T> {
    pub params: ParamSet<T>,
    pub slot_source: BTreeMap<usize, ParamSource>,
}

impl<T: Scalar> GhnModel<T> {
    /// Shape `[cd, cd, S, S]` of the decoded tensor.
    pub fn decoded_shape(&self) -> [usize; 4] {
        let cd = self.config().decoder_channels();
        let s = self.config().decoder_spatial;
        [cd, cd, s, s]
    }

    /// Decoder values at the given spatial positions (`y * S + x`) and
    /// channel-pair rows (`o * cd + i`), as `[positions, rows]`.
    ///
    /// The decoder is `A = relu(W1 h + b1)` reshaped to `[dh, S*S]`, then
    /// `T[o, i, y, x] = W2[o*cd + i] . A[:, y*S + x] + b2[o*cd + i]`.
    fn decode_at<'t>(&self, b: &[Var<'t, T>], h_row: Var<'t, T>, positions: &[usize], rows: &[usize]) -> Var<'t, T> {
        let [w1, b1, w2, b2] = self.layout.dec;
        let s2 = self.config().decoder_spatial.pow(2);
        let dh = self.config().decoder_hidden();
        let hidden_rows: Vec<usize> = (0..dh)
            .flat_map(|j| positions.iter().map(move |&p| j * s2 + p))
            .collect();
        let np = positions.len();
        let bias1 = b[b1].gather(hidden_rows.clone().into(), &[hidden_rows.len()]);
        let a = h_row
            .matmul_nt(b[w1].gather_rows(&hidden_rows))
            .add_row(bias1)
            .relu()
            .reshape(&[dh, np])
            .t();
        let bias2 = b[b2].gather(rows.to_vec().into(), &[rows.len()]);
        a.matmul_nt(b[w2].gather_rows(rows)).add_row(bias2)
    }

    /// The full decoded tensor `[cd, cd, S, S]` for one node feature row
    /// `[1, d]`.
    pub fn decode_node<'t>(&self, b: &[Var<'t, T>], h_row: Var<'t, T>) -> Var<'t, T> {
        let [cd, _, s, _] = self.decoded_shape();
        let positions: Vec<usize> = (0..s * s).collect();
        let rows: Vec<usize> = (0..cd * cd).collect();
        let m = self.decode_at(b, h_row, &positions, &rows);
        let mut index = Vec::with_capacity(cd * cd * s * s);
        for r in 0..cd * cd {
            for p in 0..s * s {
                index.push(p * cd * cd + r);
            }
        }
        m.gather(index.into(), &[cd, cd, s, s])
    }

    /// The decoded tensor materialised to `target`, computing only the
    /// decoder outputs the target reads. Equal to
    /// `materialize(decode_node(h), target)`.
    pub fn decode_slot<'t>(&self, b: &[Var<'t, T>], h_row: Var<'t, T>, target: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.decoded_shape();
        let [cd, _, s, _] = shape;
        let coords = source_coords(shape, target)?;
        let mut pos_rank = vec![usize::MAX; s * s];
        let mut row_rank = vec![usize::MAX; cd * cd];
        for &[o, i, y, x] in &coords {
            pos_rank[y * s + x] = 0;
            row_rank[o * cd + i] = 0;
        }
        let positions = compact(&mut pos_rank);
        let rows = compact(&mut row_rank);
        let m = self.decode_at(b, h_row, &positions, &rows);
        let index: Rc<[usize]> = coords
            .iter()
            .map(|&[o, i, y, x]| pos_rank[y * s + x] * rows.len() + row_rank[o * cd + i])
            .collect();
        Ok(m.gather(index, target))
    }

    /// Parameter tensors for every parametric node of `g`, recorded on the
    /// tape of `b`. Unsupported ops get a deterministic random
    /// initialisation as constants.
    pub fn predict_vars<'t>(
        &self,
        b: &[Var<'t, T>],
        g: &ArchGraph,
        feat: &GraphFeatures,
    ) -> Result<(Vec<Option<Var<'t, T>>>, BTreeMap<usize, ParamSource>)> {
        let tape = b[0].tape();
        let enc = self.encode(b, &g.ops(), feat)?;
        let mut vars = vec![None; g.len()];
        let mut sources = BTreeMap::new();
        for node in g.param_nodes() {
            let dims = node.shape.as_ref().unwrap().dims();
            let (v, src) = if self.config().supports(node.op) {
                let h_row = enc.h.gather_rows(&[node.id]);
                let mut v = self.decode_slot(b, h_row, dims)?;
                if node.bn_role() == Some(BnRole::Scale) {
                    v = v.add_scalar(T::one());
                }
                (v, ParamSource::Predicted)
            } else {
                let mut rng = fallback_rng(g, node.id);
                (tape.constant(init_tensor(node, &mut rng)), ParamSource::RandomInit)
            };
            vars[node.id] = Some(v);
            sources.insert(node.id, src);
        }
        Ok((vars, sources))
    }
}

/// Turns a `usize::MAX`/0 occupancy vector into ranks and returns the
/// occupied positions in order.
fn compact(rank: &mut [usize]) -> Vec<usize> {
    let mut used = Vec::new();
    for (i, r) in rank.iter_mut().enumerate() {
        if *r == 0 {
            *r = used.len();
            used.push(i);
        }
    }
    used
}

fn fallback_rng(g: &ArchGraph, node: usize) -> ChaCha8Rng {
    let digest = Sha256::digest(g.structure_key().as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    seed[..8].iter_mut().zip((node as u64).to_le_bytes()).for_each(|(s, n)| *s ^= n);
    ChaCha8Rng::from_seed(seed)
}

/// Predicts every parameter of `g` in one pass without recording gradients.
pub fn predict_params<T: Scalar>(g: &ArchGraph, feat: &GraphFeatures, model: &GhnModel<T>) -> Result<PredictedParams<T>> {
    let tape = Tape::new();
    let b = model.bind(&tape, false);
    let (vars, slot_source) = model.predict_vars(&b, g, feat)?;
    let tensors = vars
        .iter()
        .enumerate()
        .filter_map(|(id, v)| v.map(|v| (id, v.value().as_ref().clone())))
        .collect();
    Ok(PredictedParams {
        params: ParamSet {
            tensors,
            source: ParamSource::Predicted,
        },
        slot_source,
    })
}
