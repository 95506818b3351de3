//! Higher-order derivative features for message-passing graph networks.
//!
//! A base MPNN is run on a graph while sparse derivative tensors of its node
//! features with respect to the input features are propagated alongside. The
//! tensors are encoded into extra node features for a downstream MPNN, and the
//! whole pipeline is trained end to end.

pub mod activation;
pub mod deriv;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod hod;
mod json;
pub mod mpnn;
pub mod train;
pub mod verify;

pub use activation::Activation;
pub use error::{Error, Result};
pub use graph::Graph;
