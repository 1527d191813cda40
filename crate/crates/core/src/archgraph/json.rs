use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{build_ranked, ArchGraph, ArchSpec, NodeSpec};
use super::op::{NodeAttrs, OpKind};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    name: String,
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeJson {
    id: usize,
    op: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "is_empty")]
    attrs: NodeAttrs,
}

fn is_empty(a: &NodeAttrs) -> bool {
    *a == NodeAttrs::default()
}

impl ArchGraph {
    pub fn to_json(&self) -> String {
        let doc = GraphJson {
            name: self.name().to_string(),
            nodes: self
                .nodes()
                .iter()
                .map(|n| NodeJson {
                    id: n.id,
                    op: n.op,
                    shape: n.shape.as_ref().map(|s| s.dims().to_vec()),
                    attrs: n.attrs.clone(),
                })
                .collect(),
            edges: self.edges().iter().map(|&(s, d)| [s, d]).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    /// Parses and re-validates a graph. Declared parameter shapes must agree
    /// with the shapes implied by the attributes.
    pub fn from_json(text: &str) -> Result<ArchGraph> {
        let doc: GraphJson = serde_json::from_str(text)?;
        let n = doc.nodes.len();
        let mut slots: Vec<Option<&NodeJson>> = vec![None; n];
        for node in &doc.nodes {
            if node.id >= n || slots[node.id].is_some() {
                return Err(Error::InvalidGraph(format!(
                    "node ids must be a permutation of 0..{n}, found {}",
                    node.id
                )));
            }
            slots[node.id] = Some(node);
        }
        let nodes: Vec<&NodeJson> = slots.into_iter().map(Option::unwrap).collect();
        let spec = ArchSpec {
            name: doc.name,
            nodes: nodes
                .iter()
                .map(|n| NodeSpec {
                    op: n.op,
                    attrs: n.attrs.clone(),
                })
                .collect(),
            edges: doc.edges.iter().map(|e| (e[0], e[1])).collect(),
        };
        let (g, rank) = build_ranked(&spec)?;
        for (declared, &id) in nodes.iter().zip(&rank) {
            let node = g.node(id);
            let inferred = node.shape.as_ref().map(|s| s.dims().to_vec());
            if declared.shape.is_some() && declared.shape != inferred {
                return Err(Error::ShapeMismatch {
                    node: node.id,
                    detail: format!("declared shape {:?}, inferred {:?}", declared.shape, inferred),
                });
            }
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ArchGraph> {
        let text = fs::read_to_string(path)?;
        ArchGraph::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    /// Serialization without the name; equal keys mean equal architectures.
    pub fn structure_key(&self) -> String {
        self.clone().with_name("").to_json()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"name":"x","nodes":[],"edges":[],"extra":1}"#;
        assert!(matches!(ArchGraph::from_json(text), Err(Error::Json(_))));
    }

    #[test]
    fn wrong_declared_shape_is_rejected() {
        let text = r#"{"name":"x","nodes":[
            {"id":0,"op":"input","attrs":{"channels":3,"size":8}},
            {"id":1,"op":"global_avg_pool"},
            {"id":2,"op":"classifier_head","shape":[10,4],"attrs":{"channels":10}}],
            "edges":[[0,1],[1,2]]}"#;
        assert!(matches!(
            ArchGraph::from_json(text),
            Err(Error::ShapeMismatch { node: 2, .. })
        ));
    }
}
