//! Cross-scale parametric knowledge transfer between two toy decoder-only
//! transformers.
//!
//! The crate covers the full chain: a synthetic factual-recall world
//! ([`data`]), a transformer whose residual stream decomposes exactly into
//! neuron contributions ([`model`]), logit-lens neuron attribution
//! ([`attribution`]), knowledge extraction and the unaligned baselines
//! ([`extraction`]), hypernetwork pre-alignment and LoRA post-alignment
//! ([`transfer`]), similarity and delta statistics ([`analysis`]), and a
//! reproducible end-to-end pipeline ([`cli`]).

pub mod analysis;
pub mod attribution;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod extraction;
pub mod model;
pub mod numerics;
pub mod transfer;

pub use error::{PktError, Result};
pub use numerics::{Real, Tensor};
