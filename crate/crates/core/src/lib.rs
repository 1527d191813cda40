//! Graph hypernetworks that predict every parameter of a convolutional
//! network from its computational graph in a single forward pass.
//!
//! The crate is organised bottom-up:
//!
//! * [`archgraph`]: architecture IR, random spaces, structural features.
//! * [`target_net`]: executes a graph as a differentiable classifier.
//! * [`ghn`]: the graph-transformer encoder and the parameter decoder.
//! * [`trainer`]: meta-batch training of the hypernetwork.
//! * [`evalkit`]: evaluation protocols and analyses.
//! * [`data`]: the small on-disk image dataset used throughout.

pub mod archgraph;
pub mod data;
mod error;
pub mod evalkit;
pub mod ghn;
pub mod target_net;
pub mod trainer;

pub use error::{Error, Result};
