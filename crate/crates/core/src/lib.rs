//! Graph classification with ego-convolutions.
//!
//! Pipeline: 1-WL refinement picks each node's `K` rarest neighbors once
//! ([`neighbors`]), ego-convolution layers stack node rows with their
//! neighbors' rows ([`egoconv`]), a dense head classifies the ranked node
//! embeddings ([`model`]), and an attention probe plus transposed
//! deconvolution traces predictions back to nodes and edges ([`critical`]).

pub mod autodiff;
pub mod critical;
pub mod dataset_io;
pub mod egoconv;
pub mod error;
pub mod graph;
pub mod model;
pub mod neighbors;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{Dataset, Graph, NodeId};
