use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ghnforge_tape::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::hungarian::min_cost_assignment;
use crate::archgraph::ArchGraph;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::target_net::{forward, ActivationTrace, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Tensors compared as stored.
    Direct,
    /// Output channels of the second tensor permuted to best match the first.
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub shape: Vec<usize>,
    pub mode: MatchMode,
    /// Mean of `1 - |cos|` over all unordered pairs; `None` with no valid pair.
    pub mean_distance: Option<f64>,
    pub pairs: usize,
    /// Pairs skipped because a tensor has zero norm.
    pub skipped: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `1 - |cos|` between two equally shaped tensors.
pub fn abs_cosine_distance<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, mode: MatchMode) -> Result<f64> {
    assert_eq!(a.shape(), b.shape(), "tensors must share a shape");
    let flat = |t: &ArrayD<T>| t.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<f64>>();
    let (x, y) = (flat(a), flat(b));
    let (sx, sy) = (dot(&x, &x), dot(&y, &y));
    if sx == 0.0 || sy == 0.0 {
        return Err(Error::DegenerateTensor);
    }
    let inner = match mode {
        MatchMode::Direct => dot(&x, &y).abs(),
        MatchMode::Hungarian => {
            let rows = a.shape().first().copied().unwrap_or(1).max(1);
            let per = x.len() / rows;
            let row = |v: &[f64], i: usize| v[i * per..(i + 1) * per].to_vec();
            let gram: Vec<Vec<f64>> = (0..rows)
                .map(|i| (0..rows).map(|j| dot(&row(&x, i), &row(&y, j))).collect())
                .collect();
            // |cos| is maximal at either the largest or the most negative
            // matched inner product.
            let neg: Vec<Vec<f64>> = gram.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            let best = |assign: Vec<usize>| assign.iter().enumerate().map(|(i, &j)| gram[i][j]).sum::<f64>();
            best(min_cost_assignment(&neg)).abs().max(best(min_cost_assignment(&gram)).abs())
        }
    };
    Ok((1.0 - inner / (sx * sy).sqrt()).clamp(0.0, 1.0))
}

/// Mean absolute cosine distance over all pairs of `tensors`, which must
/// share one shape.
pub fn diversity<T: Scalar>(tensors: &[&ArrayD<T>], mode: MatchMode) -> Result<DiversityReport> {
    if tensors.len() < 2 {
        return Err(Error::Config("diversity needs at least two tensors".into()));
    }
    let shape = tensors[0].shape().to_vec();
    if tensors.iter().any(|t| t.shape() != shape) {
        return Err(Error::Config("diversity tensors must share one shape".into()));
    }
    let (mut sum, mut pairs, mut skipped) = (0.0, 0, 0);
    for i in 0..tensors.len() {
        for j in i + 1..tensors.len() {
            match abs_cosine_distance(tensors[i], tensors[j], mode) {
                Ok(d) => {
                    sum += d;
                    pairs += 1;
                }
                Err(Error::DegenerateTensor) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(DiversityReport {
        shape,
        mode,
        mean_distance: (pairs > 0).then(|| sum / pairs as f64),
        pairs,
        skipped,
    })
}

/// Groups every tensor of `sets` by shape and reports the diversity of each
/// shape seen at least twice.
pub fn diversity_by_shape<T: Scalar>(sets: &[ParamSet<T>], mode: MatchMode) -> Result<Vec<DiversityReport>> {
    let mut groups: BTreeMap<Vec<usize>, Vec<&ArrayD<T>>> = BTreeMap::new();
    for p in sets {
        for t in p.tensors.values() {
            groups.entry(t.shape().to_vec()).or_default().push(t);
        }
    }
    groups
        .values()
        .filter(|g| g.len() >= 2)
        .map(|g| diversity(g, mode))
        .collect()
}

/// Per-layer activation variance of one network under several labelled
/// parameter sets, aligned by node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub nodes: Vec<usize>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl VarianceProbe {
    pub fn median(&self, label: &str) -> Option<f64> {
        let (_, s) = self.series.iter().find(|(l, _)| l == label)?;
        median(s)
    }

    /// Columnar text: `node` followed by one column per series.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("node");
        for (label, _) in &self.series {
            out.push('\t');
            out.push_str(label);
        }
        out.push('\n');
        for (k, node) in self.nodes.iter().enumerate() {
            out.push_str(&node.to_string());
            for (_, s) in &self.series {
                out.push_str(&format!("\t{}", s[k]));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Propagates `batch` through `g` under every labelled parameter set.
pub fn variance_probe<T: Scalar>(
    g: &ArchGraph,
    inits: &[(&str, &ParamSet<T>)],
    batch: &Batch<T>,
) -> Result<VarianceProbe> {
    let mut nodes = Vec::new();
    let mut series = Vec::with_capacity(inits.len());
    for (label, p) in inits {
        let (_, trace) = forward(g, p, batch, true)?;
        let trace: ActivationTrace = trace.unwrap();
        nodes = trace.layers.iter().map(|&(id, _)| id).collect();
        series.push((label.to_string(), trace.variances()));
    }
    Ok(VarianceProbe { nodes, series })
}

/// Kendall's tau-b between two score lists, in O(n log n).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Config("kendall_tau needs two equal-length lists of length >= 2".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Config("kendall_tau scores must not be NaN".into()));
    }
    // Adding zero maps -0.0 to 0.0 so the total order agrees with `==`.
    let a: Vec<f64> = a.iter().map(|v| v + 0.0).collect();
    let b: Vec<f64> = b.iter().map(|v| v + 0.0).collect();
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let pairs = |run: u64| run * run.saturating_sub(1) / 2;
    let tied_pairs = |eq: &dyn Fn(usize, usize) -> bool| {
        let (mut total, mut run) = (0u64, 1u64);
        for k in 1..n {
            if eq(idx[k - 1], idx[k]) {
                run += 1;
            } else {
                total += pairs(run);
                run = 1;
            }
        }
        total + pairs(run)
    };
    let ties_a = tied_pairs(&|i, j| a[i] == a[j]);
    let ties_ab = tied_pairs(&|i, j| a[i] == a[j] && b[i] == b[j]);
    let mut ys: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut ys);
    let ties_b = {
        let (mut total, mut run) = (0u64, 1u64);
        for k in 1..n {
            if ys[k - 1] == ys[k] {
                run += 1;
            } else {
                total += pairs(run);
                run = 1;
            }
        }
        total + pairs(run)
    };
    let n0 = pairs(n as u64);
    let (da, db) = (n0 - ties_a, n0 - ties_b);
    if da == 0 || db == 0 {
        return Err(Error::AllTied);
    }
    let num = n0 as i128 - ties_a as i128 - ties_b as i128 + ties_ab as i128 - 2 * swaps as i128;
    Ok(num as f64 / ((da as f64) * (db as f64)).sqrt())
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let (left, right) = v.split_at_mut(n / 2);
    let mut swaps = merge_count(left) + merge_count(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            merged.push(right[j]);
            swaps += (left.len() - i) as u64;
            j += 1;
        } else {
            merged.push(left[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    v.copy_from_slice(&merged);
    swaps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &r).unwrap(), -1.0);
        assert!(matches!(kendall_tau(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::AllTied)));
    }

    #[test]
    fn tau_with_ties_by_hand() {
        // Pairs: (1,1)-(2,2) C, (1,1)-(2,3) C, (2,2)-(2,3) tied in a.
        // n0 = 3, n1 = 1, n2 = 0: tau = 2 / sqrt(2 * 3).
        let t = kendall_tau(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn distance_extremes() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, 2.0]]).into_dyn();
        let b = ndarray::arr2(&[[0.0, 3.0], [-1.0, 0.0]]).into_dyn();
        assert_eq!(abs_cosine_distance(&a, &a, MatchMode::Direct).unwrap(), 0.0);
        let neg = a.mapv(|v: f64| -v);
        assert!(abs_cosine_distance(&a, &neg, MatchMode::Direct).unwrap() < 1e-15);
        let c = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]).into_dyn();
        assert!((abs_cosine_distance(&a, &c, MatchMode::Direct).unwrap() - 1.0).abs() < 1e-15);
        assert!(abs_cosine_distance(&a, &b, MatchMode::Hungarian).unwrap() < 1.0);
    }

    #[test]
    fn hungarian_undoes_a_channel_permutation() {
        let a = ArrayD::from_shape_fn(vec![5, 3, 2, 2], |ix| ((ix[0] * 13 + ix[1] * 7 + ix[2] * 3 + ix[3]) as f64).sin());
        let perm = [3, 0, 4, 1, 2];
        let b = ArrayD::from_shape_fn(vec![5, 3, 2, 2], |ix| a[[perm[ix[0]], ix[1], ix[2], ix[3]]]);
        assert!(abs_cosine_distance(&a, &b, MatchMode::Direct).unwrap() > 0.1);
        assert!(abs_cosine_distance(&a, &b, MatchMode::Hungarian).unwrap() < 1e-12);
    }

    #[test]
    fn zero_tensors_are_skipped() {
        let a = ArrayD::from_elem(vec![2, 2], 1.0);
        let z = ArrayD::zeros(vec![2, 2]);
        let r = diversity(&[&a, &z, &a], MatchMode::Direct).unwrap();
        assert_eq!((r.pairs, r.skipped), (1, 2));
        assert_eq!(r.mean_distance, Some(0.0));
    }
}
