//! Stationary-point fingerprints for node-embedding GNNs.
//!
//! A victim model's stationary points (graphs where nudging one node's
//! features along a direction leaves that node's embedding unchanged to first
//! order) survive any locally invertible transformation of the embedding
//! space. A candidate model that was trained to copy the victim inherits
//! them; an independently trained model does not. This crate samples such
//! points, scores candidates against them, and ships the GNN engine, attack
//! simulators and experiment harness needed to evaluate the test.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod graph;
pub mod optim;
pub mod probe;
pub mod sampler;
pub mod seed;
pub mod task;
pub mod transforms;
pub mod verifier;

pub use error::{Error, Result};
pub use gnn::{Architecture, EmbeddingModel, GnnModel, ModelSpec};
pub use graph::{DatasetSpec, Graph};
pub use probe::{q_value, QueryTuple, TupleSampler};
