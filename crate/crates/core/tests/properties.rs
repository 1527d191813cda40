mod common;

use common::small_ghn;
use ghnforge::archgraph::{sample_space, ArchGraph, ArchSpaceConfig, GraphFeatures, OpKind};
use ghnforge::ghn::{encode_ops, materialize, GhnModel};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

/// Random DAG: edges only go from lower to higher ids.
fn dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..=20).prop_flat_map(|n| {
        let all: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let k = all.len();
        (Just(n), prop::sample::subsequence(all, 0..=k.min(40)))
    })
}

fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(s, t) in edges {
        d[s][t] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

fn oracle_materialize(t: &ArrayD<i64>, target: &[usize]) -> ArrayD<i64> {
    let s = t.shape();
    let (co, ci, sh, sw) = (s[0], s[1], s[2], s[3]);
    ArrayD::from_shape_fn(IxDyn(target), |ix| match target.len() {
        1 => t[[ix[0] % co, 0, (sh - 1) / 2, (sw - 1) / 2]],
        2 => t[[ix[0] % co, ix[1] % ci, (sh - 1) / 2, (sw - 1) / 2]],
        _ => t[[ix[0] % co, ix[1] % ci, (sh - target[2]) / 2 + ix[2], (sw - target[3]) / 2 + ix[3]]],
    })
}

proptest! {
    #[test]
    fn bfs_distances_match_floyd_warshall((n, edges) in dag(), max_dist in 1usize..6) {
        let f = GraphFeatures::from_edges(n, &edges, 0, max_dist);
        let fw = floyd_warshall(n, &edges);
        for i in 0..n {
            for j in 0..n {
                let want = fw[i][j].map_or(max_dist + 1, |d| d.min(max_dist));
                prop_assert_eq!(f.spd_fw[[i, j]], want);
                prop_assert_eq!(f.spd_bw[[j, i]], want);
            }
            prop_assert_eq!(f.in_degree[i], edges.iter().filter(|e| e.1 == i).count());
            prop_assert_eq!(f.out_degree[i], edges.iter().filter(|e| e.0 == i).count());
        }
    }

    #[test]
    fn materialize_matches_index_arithmetic(
        t in (1usize..6, 1usize..6, 1usize..6, 1usize..6),
        target in prop::collection::vec(1usize..12, 1..=4),
    ) {
        prop_assume!(target.len() != 3);
        let shape = [t.0, t.1, t.2, t.3];
        let src = ArrayD::from_shape_fn(IxDyn(&shape), |ix| (((ix[0] * 7 + ix[1]) * 11 + ix[2]) * 13 + ix[3]) as i64);
        let got = materialize(&src, &target);
        if target.len() == 4 && (target[2] > shape[2] || target[3] > shape[3]) {
            prop_assert!(got.is_err());
        } else {
            prop_assert_eq!(got.unwrap(), oracle_materialize(&src, &target));
        }
    }

    #[test]
    fn encoder_commutes_with_relabelling((n, edges) in dag(), seed in any::<u64>()) {
        let model = GhnModel::<f64>::new(small_ghn(seed % 7));
        let ops: Vec<OpKind> = (0..n).map(|i| OpKind::ALL[(i * 5 + seed as usize) % OpKind::COUNT]).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.rotate_left((seed % n as u64) as usize);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let feat = GraphFeatures::from_edges(n, &edges, 0, 16);
        let p_edges: Vec<_> = edges.iter().map(|&(s, d)| (inv[s], inv[d])).collect();
        let p_feat = GraphFeatures::from_edges(n, &p_edges, inv[0], 16);
        let p_ops: Vec<OpKind> = perm.iter().map(|&o| ops[o]).collect();
        let (h, _) = encode_ops(&ops, &feat, &model).unwrap();
        let (hp, _) = encode_ops(&p_ops, &p_feat, &model).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in hp.row(new).iter().zip(h.row(old)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_graphs_survive_json(seed in any::<u64>()) {
        let graphs = sample_space(&ArchSpaceConfig { n_archs: 3, seed, ..ArchSpaceConfig::default() }).unwrap();
        for g in &graphs {
            let back = ArchGraph::from_json(&g.to_json()).unwrap();
            prop_assert_eq!(back.structure_key(), g.structure_key());
            prop_assert_eq!(back.num_params(), g.num_params());
            prop_assert_eq!(g.node(0).op, OpKind::Input);
            prop_assert_eq!(g.node(g.sink()).op, OpKind::ClassifierHead);
            prop_assert!(g.edges().iter().all(|&(s, d)| s < d));
        }
    }
}
