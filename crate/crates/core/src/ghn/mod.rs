//! The graph hypernetwork: a graph transformer over node embeddings and a
//! shared decoder that turns each node feature into a parameter tensor.

mod config;
mod decoder;
mod encoder;
mod materialize;
mod model;

pub use config::{EdgeMode, GhnConfig};
pub use decoder::{predict_params, PredictedParams};
pub use encoder::{encode_ops, encoder_forward, Encoded};
pub use materialize::{materialize, materialize_index, source_coords};
pub use model::GhnModel;
