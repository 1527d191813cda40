use std::collections::VecDeque;

use ndarray::Array2;

use super::graph::ArchGraph;

/// Structural inputs of the graph encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    pub max_dist: usize,
    pub in_degree: Vec<usize>,
    pub out_degree: Vec<usize>,
    /// `spd_fw[[i, j]]`: directed shortest-path length from `i` to `j`,
    /// clipped to `max_dist`, or [`GraphFeatures::unreachable`].
    pub spd_fw: Array2<usize>,
    /// `spd_bw[[i, j]] == spd_fw[[j, i]]`.
    pub spd_bw: Array2<usize>,
    /// Bucketed distance from the input node.
    pub input_dist: Vec<usize>,
}

impl GraphFeatures {
    pub fn len(&self) -> usize {
        self.in_degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_degree.is_empty()
    }

    /// Bucket used for pairs without a directed path.
    pub fn unreachable(&self) -> usize {
        self.max_dist + 1
    }

    /// Features of an arbitrary DAG given as an edge list, with distances to
    /// other nodes measured from `source`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], source: usize, max_dist: usize) -> Self {
        assert!(max_dist >= 1, "max_dist must be at least 1");
        let mut in_degree = vec![0; n];
        let mut out_degree = vec![0; n];
        for &(s, d) in edges {
            out_degree[s] += 1;
            in_degree[d] += 1;
        }
        let unreachable = max_dist + 1;
        let dist = shortest_paths(n, edges);
        let spd_fw = Array2::from_shape_fn((n, n), |(i, j)| dist[i][j].map_or(unreachable, |d| d.min(max_dist)));
        let spd_bw = spd_fw.t().to_owned();
        let input_dist = spd_fw.row(source).to_vec();
        Self {
            max_dist,
            in_degree,
            out_degree,
            spd_fw,
            spd_bw,
            input_dist,
        }
    }
}

/// BFS-based directed shortest paths and degree counts of `g`.
pub fn compute_features(g: &ArchGraph, max_dist: usize) -> GraphFeatures {
    GraphFeatures::from_edges(g.len(), g.edges(), 0, max_dist)
}

/// Unclipped directed hop counts between every ordered pair, one BFS per node.
pub fn shortest_paths(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut adj = vec![Vec::new(); n];
    for &(s, d) in edges {
        adj[s].push(d);
    }
    (0..n)
        .map(|src| {
            let mut dist = vec![None; n];
            dist[src] = Some(0);
            let mut queue = VecDeque::from([src]);
            while let Some(v) = queue.pop_front() {
                let next = dist[v].unwrap() + 1;
                for &w in &adj[v] {
                    if dist[w].is_none() {
                        dist[w] = Some(next);
                        queue.push_back(w);
                    }
                }
            }
            dist
        })
        .collect()
}
