use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use super::op::{ActShape, BnRole, NodeAttrs, OpKind, ParamShape};
use crate::error::{Error, Result};

/// Unvalidated architecture description: nodes in any order plus edges
/// between their positions.
#[derive(Debug, Clone, Default)]
pub struct ArchSpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub op: OpKind,
    pub attrs: NodeAttrs,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    /// Appends a node fed by `inputs` and returns its position.
    pub fn add(&mut self, op: OpKind, attrs: NodeAttrs, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeSpec { op, attrs });
        self.edges.extend(inputs.iter().map(|&src| (src, id)));
        id
    }

    /// Appends a batch norm as a scale node followed by a shift node.
    pub fn add_bn(&mut self, input: usize) -> usize {
        let scale = self.add(OpKind::BatchNorm, NodeAttrs::bn(BnRole::Scale), &[input]);
        self.add(OpKind::BatchNorm, NodeAttrs::bn(BnRole::Shift), &[scale])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub op: OpKind,
    pub shape: Option<ParamShape>,
    pub attrs: NodeAttrs,
    /// Activation shape produced by this node.
    pub out: ActShape,
}

impl Node {
    pub fn bn_role(&self) -> Option<BnRole> {
        match self.op {
            OpKind::BatchNorm => Some(self.attrs.role.unwrap_or(BnRole::Scale)),
            _ => None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.attrs.kernel.unwrap_or(1)
    }

    pub fn stride(&self) -> usize {
        self.attrs.stride.unwrap_or(1)
    }
}

/// Validated computational graph of a target network.
///
/// Nodes are numbered in topological order with ties broken by their position
/// in the originating [`ArchSpec`]; node 0 is the input and the last node is
/// the classifier head. Multi-input nodes consume their inputs in ascending
/// id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchGraph {
    name: String,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

impl ArchGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges sorted by `(src, dst)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn preds(&self, id: usize) -> &[usize] {
        &self.preds[id]
    }

    pub fn succs(&self, id: usize) -> &[usize] {
        &self.succs[id]
    }

    pub fn ops(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op).collect()
    }

    pub fn sink(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.sink()].out.channels()
    }

    /// `(channels, height, width)` expected for one input image.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self.nodes[0].out {
            ActShape::Map {
                channels,
                height,
                width,
            } => (channels, height, width),
            ActShape::Vector { features } => (features, 1, 1),
        }
    }

    pub fn param_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.shape.is_some())
    }

    pub fn num_params(&self) -> usize {
        self.param_nodes()
            .map(|n| n.shape.as_ref().map_or(0, ParamShape::numel))
            .sum()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn to_spec(&self) -> ArchSpec {
        ArchSpec {
            name: self.name.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    op: n.op,
                    attrs: n.attrs.clone(),
                })
                .collect(),
            edges: self.edges.clone(),
        }
    }

    /// Same graph with the classifier head resized to `classes` outputs.
    pub fn with_num_classes(&self, classes: usize) -> Result<ArchGraph> {
        let mut spec = self.to_spec();
        spec.nodes[self.sink()].attrs.channels = Some(classes);
        build_graph(&spec)
    }
}

/// Validates `spec` and numbers its nodes topologically.
///
/// Errors name nodes by their position in `spec`.
pub fn build_graph(spec: &ArchSpec) -> Result<ArchGraph> {
    build_ranked(spec).map(|(g, _)| g)
}

/// [`build_graph`] plus the new id of every spec position.
pub(crate) fn build_ranked(spec: &ArchSpec) -> Result<(ArchGraph, Vec<usize>)> {
    let n = spec.nodes.len();
    if n < 2 {
        return Err(Error::InvalidGraph(
            "a graph needs at least an input and a classifier head".into(),
        ));
    }
    let mut seen = HashSet::new();
    let mut preds = vec![Vec::new(); n];
    let mut succs = vec![Vec::new(); n];
    for &(s, d) in &spec.edges {
        if s >= n || d >= n {
            return Err(Error::InvalidGraph(format!("edge ({s}, {d}) references a missing node")));
        }
        if s == d {
            return Err(Error::Cycle);
        }
        if !seen.insert((s, d)) {
            return Err(Error::InvalidGraph(format!("duplicate edge ({s}, {d})")));
        }
        preds[d].push(s);
        succs[s].push(d);
    }
    for p in &mut preds {
        p.sort_unstable();
    }

    let order = topological_order(n, &preds, &succs)?;

    let count = |op: OpKind| spec.nodes.iter().filter(|s| s.op == op).count();
    if count(OpKind::Input) != 1 {
        return Err(Error::InvalidGraph("exactly one input node is required".into()));
    }
    if count(OpKind::ClassifierHead) != 1 {
        return Err(Error::InvalidGraph("exactly one classifier head is required".into()));
    }
    let input = spec.nodes.iter().position(|s| s.op == OpKind::Input).unwrap();
    let head = spec
        .nodes
        .iter()
        .position(|s| s.op == OpKind::ClassifierHead)
        .unwrap();
    if !preds[input].is_empty() {
        return Err(Error::InvalidGraph("the input node cannot have incoming edges".into()));
    }
    let from_input = reach(input, &succs);
    let to_head = reach(head, &preds);
    if let Some(v) = (0..n).find(|&v| !from_input[v] || !to_head[v]) {
        return Err(Error::DanglingNode(v));
    }

    // Inputs of multi-input nodes are consumed in final id order, which is
    // the topological rank.
    let mut rank = vec![0; n];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    for p in &mut preds {
        p.sort_unstable_by_key(|&v| rank[v]);
    }

    let mut outs: Vec<Option<ActShape>> = vec![None; n];
    let mut shapes: Vec<Option<ParamShape>> = vec![None; n];
    for &v in &order {
        let ins: Vec<ActShape> = preds[v].iter().map(|&p| outs[p].unwrap()).collect();
        let (out, shape) = infer(v, &spec.nodes[v], &ins)?;
        outs[v] = Some(out);
        shapes[v] = shape;
    }

    let nodes: Vec<Node> = order
        .iter()
        .enumerate()
        .map(|(id, &v)| Node {
            id,
            op: spec.nodes[v].op,
            shape: shapes[v].clone(),
            attrs: spec.nodes[v].attrs.clone(),
            out: outs[v].unwrap(),
        })
        .collect();
    let mut edges: Vec<(usize, usize)> = spec.edges.iter().map(|&(s, d)| (rank[s], rank[d])).collect();
    edges.sort_unstable();
    let mut new_preds = vec![Vec::new(); n];
    let mut new_succs = vec![Vec::new(); n];
    for &(s, d) in &edges {
        new_preds[d].push(s);
        new_succs[s].push(d);
    }
    let g = ArchGraph {
        name: spec.name.clone(),
        nodes,
        edges,
        preds: new_preds,
        succs: new_succs,
    };
    Ok((g, rank))
}

/// Kahn's algorithm, always emitting the lowest-positioned ready node.
fn topological_order(n: usize, preds: &[Vec<usize>], succs: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indeg[v] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &w in &succs[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() < n {
        return Err(Error::Cycle);
    }
    Ok(order)
}

fn reach(start: usize, adj: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen
}

fn infer(v: usize, spec: &NodeSpec, ins: &[ActShape]) -> Result<(ActShape, Option<ParamShape>)> {
    let mismatch = |detail: String| Error::ShapeMismatch { node: v, detail };
    let need = |what: &str, val: Option<usize>| {
        val.filter(|&x| x >= 1)
            .ok_or_else(|| Error::InvalidGraph(format!("node {v} ({}) needs a positive `{what}`", spec.op)))
    };
    let arity_ok = match spec.op {
        OpKind::Input => ins.is_empty(),
        OpKind::Add | OpKind::Concat => ins.len() >= 2,
        _ => ins.len() == 1,
    };
    if !arity_ok {
        return Err(Error::InvalidGraph(format!(
            "node {v} ({}) has {} inputs",
            spec.op,
            ins.len()
        )));
    }
    let a = &spec.attrs;
    let map = |x: ActShape| match x {
        ActShape::Map {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        ActShape::Vector { .. } => Err(mismatch(format!("{} expects a feature map, got {x}", spec.op))),
    };
    let vector = |x: ActShape| match x {
        ActShape::Vector { features } => Ok(features),
        ActShape::Map { .. } => Err(mismatch(format!("{} expects a feature vector, got {x}", spec.op))),
    };
    let shape = |dims: Vec<usize>| ParamShape::new(dims).expect("positive dims");
    Ok(match spec.op {
        OpKind::Input => {
            let c = need("channels", a.channels)?;
            let s = need("size", a.size)?;
            (
                ActShape::Map {
                    channels: c,
                    height: s,
                    width: s,
                },
                None,
            )
        }
        OpKind::Conv2d => {
            let (c, h, w) = map(ins[0])?;
            let o = need("channels", a.channels)?;
            let k = need("kernel", a.kernel)?;
            let s = a.stride.unwrap_or(1).max(1);
            let pad = k / 2;
            if h + 2 * pad < k || w + 2 * pad < k {
                return Err(mismatch(format!("kernel {k} exceeds input {h}x{w}")));
            }
            (
                ActShape::Map {
                    channels: o,
                    height: (h + 2 * pad - k) / s + 1,
                    width: (w + 2 * pad - k) / s + 1,
                },
                Some(shape(vec![o, c, k, k])),
            )
        }
        OpKind::MaxPool | OpKind::AvgPool => {
            let (c, h, w) = map(ins[0])?;
            let k = need("kernel", a.kernel)?;
            let s = a.stride.unwrap_or(k).max(1);
            if h < k || w < k {
                return Err(mismatch(format!("pool window {k} exceeds input {h}x{w}")));
            }
            (
                ActShape::Map {
                    channels: c,
                    height: (h - k) / s + 1,
                    width: (w - k) / s + 1,
                },
                None,
            )
        }
        OpKind::GlobalAvgPool => {
            let (c, _, _) = map(ins[0])?;
            (ActShape::Vector { features: c }, None)
        }
        OpKind::Linear | OpKind::ClassifierHead => {
            let f = vector(ins[0])?;
            let o = need("channels", a.channels)?;
            (ActShape::Vector { features: o }, Some(shape(vec![o, f])))
        }
        OpKind::BatchNorm => (ins[0], Some(shape(vec![ins[0].channels()]))),
        OpKind::Relu | OpKind::Silu => (ins[0], None),
        OpKind::Add => {
            if let Some(bad) = ins.iter().find(|x| **x != ins[0]) {
                return Err(mismatch(format!("add joins {} with {bad}", ins[0])));
            }
            (ins[0], None)
        }
        OpKind::Concat => match ins[0] {
            ActShape::Map { height, width, .. } => {
                let mut channels = 0;
                for &x in ins {
                    let (c, h, w) = map(x)?;
                    if (h, w) != (height, width) {
                        return Err(mismatch(format!("concat joins {} with {x}", ins[0])));
                    }
                    channels += c;
                }
                (
                    ActShape::Map {
                        channels,
                        height,
                        width,
                    },
                    None,
                )
            }
            ActShape::Vector { .. } => {
                let mut features = 0;
                for &x in ins {
                    features += vector(x)?;
                }
                (ActShape::Vector { features }, None)
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ArchSpec {
        let mut s = ArchSpec::new("chain");
        let x = s.add(OpKind::Input, NodeAttrs::input(3, 8), &[]);
        let c = s.add(OpKind::Conv2d, NodeAttrs::conv(8, 3, 1), &[x]);
        let p = s.add(OpKind::GlobalAvgPool, NodeAttrs::default(), &[c]);
        s.add(OpKind::ClassifierHead, NodeAttrs::channels(10), &[p]);
        s
    }

    #[test]
    fn minimal_chain() {
        let g = build_graph(&chain()).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.edges().len(), 3);
        assert_eq!(g.node(1).shape.as_ref().unwrap().dims(), &[8, 3, 3, 3]);
        assert_eq!(g.node(3).shape.as_ref().unwrap().dims(), &[10, 8]);
        assert_eq!(g.num_params(), 8 * 27 + 80);
    }

    #[test]
    fn residual_block() {
        let mut s = ArchSpec::new("res");
        let x = s.add(OpKind::Input, NodeAttrs::input(4, 8), &[]);
        let a = s.add(OpKind::Conv2d, NodeAttrs::conv(4, 3, 1), &[x]);
        let b = s.add(OpKind::Conv2d, NodeAttrs::conv(4, 3, 1), &[a]);
        let j = s.add(OpKind::Add, NodeAttrs::default(), &[b, x]);
        let p = s.add(OpKind::GlobalAvgPool, NodeAttrs::default(), &[j]);
        s.add(OpKind::ClassifierHead, NodeAttrs::channels(10), &[p]);
        let g = build_graph(&s).unwrap();
        assert_eq!(g.preds(3), &[0, 2]);
    }

    #[test]
    fn mismatched_join() {
        let mut s = ArchSpec::new("bad");
        let x = s.add(OpKind::Input, NodeAttrs::input(3, 8), &[]);
        let a = s.add(OpKind::Conv2d, NodeAttrs::conv(3, 3, 1), &[x]);
        let b = s.add(OpKind::Conv2d, NodeAttrs::conv(5, 3, 1), &[x]);
        let j = s.add(OpKind::Add, NodeAttrs::default(), &[a, b]);
        let p = s.add(OpKind::GlobalAvgPool, NodeAttrs::default(), &[j]);
        s.add(OpKind::ClassifierHead, NodeAttrs::channels(10), &[p]);
        assert!(matches!(build_graph(&s), Err(Error::ShapeMismatch { node: 3, .. })));
    }

    #[test]
    fn cycles_and_dangling_nodes() {
        let mut s = chain();
        s.edges.push((2, 1));
        assert!(matches!(build_graph(&s), Err(Error::Cycle)));

        let mut s = chain();
        s.add(OpKind::Relu, NodeAttrs::default(), &[1]);
        assert!(matches!(build_graph(&s), Err(Error::DanglingNode(4))));
    }

    #[test]
    fn numbering_is_topological_with_insertion_tiebreak() {
        let mut s = ArchSpec::new("shuffled");
        let head = s.add(OpKind::ClassifierHead, NodeAttrs::channels(2), &[]);
        let gap = s.add(OpKind::GlobalAvgPool, NodeAttrs::default(), &[]);
        let b2 = s.add(OpKind::Relu, NodeAttrs::default(), &[]);
        let b1 = s.add(OpKind::Silu, NodeAttrs::default(), &[]);
        let cat = s.add(OpKind::Concat, NodeAttrs::default(), &[]);
        let x = s.add(OpKind::Input, NodeAttrs::input(2, 4), &[]);
        s.edges = vec![(x, b1), (x, b2), (b1, cat), (b2, cat), (cat, gap), (gap, head)];
        let g = build_graph(&s).unwrap();
        let ops: Vec<_> = g.ops();
        assert_eq!(
            ops,
            [
                OpKind::Input,
                OpKind::Relu,
                OpKind::Silu,
                OpKind::Concat,
                OpKind::GlobalAvgPool,
                OpKind::ClassifierHead
            ]
        );
        assert_eq!(g.preds(3), &[1, 2]);
        assert_eq!(g.node(3).out.channels(), 4);
    }

    #[test]
    fn head_resize_keeps_everything_else() {
        let g = build_graph(&chain()).unwrap();
        let h = g.with_num_classes(100).unwrap();
        assert_eq!(h.node(3).shape.as_ref().unwrap().dims(), &[100, 8]);
        assert_eq!(g.nodes()[..3], h.nodes()[..3]);
    }
}
