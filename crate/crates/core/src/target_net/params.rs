use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ghnforge_tape::{lit, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archgraph::{ArchGraph, BnRole, OpKind};
use crate::error::{Error, Result};

/// Where a tensor (or a whole set) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    RandomInit,
    Predicted,
    Loaded,
}

impl ParamSource {
    fn code(self) -> u8 {
        match self {
            ParamSource::RandomInit => 0,
            ParamSource::Predicted => 1,
            ParamSource::Loaded => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [ParamSource::RandomInit, ParamSource::Predicted, ParamSource::Loaded]
            .into_iter()
            .find(|s| s.code() == c)
    }
}

/// Parameter tensors of one target network, keyed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: BTreeMap<usize, ArrayD<T>>,
    pub source: ParamSource,
}

const MAGIC: &[u8; 4] = b"GHNP";
const VERSION: u32 = 1;

impl<T: Scalar> ParamSet<T> {
    /// Checks keys, shapes and finiteness against `g`.
    pub fn validate(&self, g: &ArchGraph) -> Result<()> {
        let expected: Vec<usize> = g.param_nodes().map(|n| n.id).collect();
        let got: Vec<usize> = self.tensors.keys().copied().collect();
        if expected != got {
            return Err(Error::InvalidGraph(format!(
                "parameter set covers nodes {got:?}, graph `{}` needs {expected:?}",
                g.name()
            )));
        }
        for n in g.param_nodes() {
            let t = &self.tensors[&n.id];
            let want = n.shape.as_ref().unwrap().dims();
            if t.shape() != want {
                return Err(Error::ShapeMismatch {
                    node: n.id,
                    detail: format!("tensor {:?}, slot {:?}", t.shape(), want),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation(n.id));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(&k, t)| (k, t.mapv(|v| lit(v.to_f64().unwrap()))))
                .collect(),
            source: self.source,
        }
    }

    /// Mean absolute value over every element.
    pub fn mean_abs(&self) -> f64 {
        let total: f64 = self
            .tensors
            .values()
            .flat_map(|t| t.iter())
            .map(|v| v.to_f64().unwrap().abs())
            .sum();
        total / self.num_params().max(1) as f64
    }

    /// SHA-256 over the tensors whose node ids pass `keep`, in id order.
    pub fn digest(&self, keep: impl Fn(usize) -> bool) -> String {
        let mut h = Sha256::new();
        for (&id, t) in &self.tensors {
            if keep(id) {
                h.update((id as u64).to_le_bytes());
                for v in t.iter() {
                    h.update(v.to_f64().unwrap().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the versioned binary format: header, then one
    /// `(node_id, rank, dims, f32 payload)` record per tensor.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.source.code()])?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (&id, t) in &self.tensors {
            w.write_all(&(id as u32).to_le_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.iter() {
                buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<ParamSet<T>> {
        let bad = |d: &str| Error::format("<param set>", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a parameter set"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let source = ParamSource::from_code(code[0]).ok_or_else(|| bad("unknown source tag"))?;
        let count = read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let id = read_u32(r)? as usize;
            let rank = read_u32(r)? as usize;
            if rank > 4 {
                return Err(bad("tensor rank above 4"));
            }
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<T> = buf
                .chunks_exact(4)
                .map(|b| lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            tensors.insert(id, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
        }
        Ok(ParamSet { tensors, source })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet<T>> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut &bytes[..]).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::format(path, "truncated file")
            }
            other => other,
        })
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Little-endian payload of `width` bytes (4 or 8) per value.
pub(crate) fn write_scalars<'a, T: Scalar + 'a>(
    w: &mut impl Write,
    values: impl ExactSizeIterator<Item = &'a T>,
    width: u8,
) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * width as usize);
    for v in values {
        match width {
            4 => buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
            _ => buf.extend_from_slice(&v.to_f64().unwrap().to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_scalars<T: Scalar>(r: &mut impl Read, n: usize, width: u8) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * width as usize];
    r.read_exact(&mut buf)?;
    Ok(match width {
        4 => buf
            .chunks_exact(4)
            .map(|b| lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect(),
        _ => buf
            .chunks_exact(8)
            .map(|b| lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect(),
    })
}

/// Storage width of `T` in checkpoint payloads.
pub(crate) fn scalar_width<T>() -> u8 {
    if std::mem::size_of::<T>() >= 8 {
        8
    } else {
        4
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), batch-norm scale 1 and
/// shift 0.
pub fn random_init<T: Scalar>(g: &ArchGraph, rng: &mut impl Rng) -> ParamSet<T> {
    let tensors = g
        .param_nodes()
        .map(|n| (n.id, init_tensor(n, rng)))
        .collect();
    ParamSet {
        tensors,
        source: ParamSource::RandomInit,
    }
}

pub(crate) fn init_tensor<T: Scalar>(n: &crate::archgraph::Node, rng: &mut impl Rng) -> ArrayD<T> {
    let dims = n.shape.as_ref().expect("parametric node").dims();
    match n.bn_role() {
        Some(BnRole::Scale) => ArrayD::from_elem(IxDyn(dims), T::one()),
        Some(BnRole::Shift) => ArrayD::zeros(IxDyn(dims)),
        None => {
            debug_assert!(matches!(n.op, OpKind::Conv2d | OpKind::Linear | OpKind::ClassifierHead));
            let fan_in: usize = dims[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            ArrayD::from_shape_simple_fn(IxDyn(dims), || lit(std * rng.sample::<f64, _>(StandardNormal)))
        }
    }
}

/// Replaces the classifier head by a freshly initialised one with
/// `classes` outputs. Returns the resized graph and parameters.
pub fn reinit_head<T: Scalar>(
    g: &ArchGraph,
    p: &ParamSet<T>,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<(ArchGraph, ParamSet<T>)> {
    let g2 = g.with_num_classes(classes)?;
    let head = g2.sink();
    let mut out = p.clone();
    out.tensors.insert(head, init_tensor(g2.node(head), rng));
    Ok((g2, out))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::archgraph::{sample_space, ArchSpaceConfig};

    fn graph() -> ArchGraph {
        sample_space(&ArchSpaceConfig {
            n_archs: 1,
            bn_p: 1.0,
            seed: 11,
            ..ArchSpaceConfig::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn checkpoint_round_trip() {
        let g = graph();
        let p: ParamSet<f32> = random_init(&g, &mut ChaCha8Rng::seed_from_u64(0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        let q = ParamSet::<f32>::load(&path).unwrap();
        assert_eq!(p, q);
        q.validate(&g).unwrap();

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ParamSet::<f32>::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_norm_starts_as_identity() {
        let g = graph();
        let p: ParamSet<f64> = random_init(&g, &mut ChaCha8Rng::seed_from_u64(0));
        for n in g.nodes() {
            match n.bn_role() {
                Some(BnRole::Scale) => assert!(p.tensors[&n.id].iter().all(|&v| v == 1.0)),
                Some(BnRole::Shift) => assert!(p.tensors[&n.id].iter().all(|&v| v == 0.0)),
                None => {}
            }
        }
    }

    #[test]
    fn head_reinit_touches_only_the_head() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: ParamSet<f32> = random_init(&g, &mut rng);
        let head = g.sink();
        let (g2, q) = reinit_head(&g, &p, 100, &mut rng).unwrap();
        assert_eq!(q.tensors[&head].shape()[0], 100);
        q.validate(&g2).unwrap();
        assert_eq!(p.digest(|id| id != head), q.digest(|id| id != head));
        let (_, same) = reinit_head(&g, &p, g.num_classes(), &mut rng).unwrap();
        for (id, t) in &p.tensors {
            if *id != head {
                assert_eq!(t, &same.tensors[id]);
            }
        }
    }
}
