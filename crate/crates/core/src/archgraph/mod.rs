//! Architecture graphs: the IR, a random architecture generator and the
//! structural features consumed by the graph encoder.

mod features;
mod graph;
mod json;
mod op;
mod space;

pub use features::{compute_features, shortest_paths, GraphFeatures};
pub use graph::{build_graph, ArchGraph, ArchSpec, Node, NodeSpec};
pub use op::{ActShape, BnRole, NodeAttrs, OpKind, ParamShape};
pub use space::{
    read_space, sample_space, sample_space_excluding, space_stats, write_space, ArchSpaceConfig,
    SpaceManifest, SpaceStats, SPACE_MANIFEST,
};
