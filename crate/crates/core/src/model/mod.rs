//! Toy pre-norm decoder-only transformer.
//!
//! Every sublayer reads an RMS-normalized copy of the residual stream and
//! writes its output back additively, so `h^l = h^{l-1} + A^l + F^l` holds
//! exactly and each sublayer output splits into per-neuron contributions.
//! There are no positional parameters; causal attention over the short
//! `e r =` prompts already distinguishes entity from relation by content.

mod checkpoint;
mod forward;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_with_metadata, save_checkpoint};
pub use forward::{
    accuracy, attn_value_output_sum, build_graph, ffn_neuron_sum, forward, lm_loss, loss_graph, predict, ForwardOutput,
    ForwardTrace, GraphOut, LayerTrace, LayerVars, ParamVars,
};
pub use params::{LayerParams, ModelConfig, TransformerParams, WeightKind};
pub use train::{train, TrainOptions, TrainReport};

/// Epsilon inside every RMS normalization.
pub const NORM_EPS: f64 = 1e-6;
