// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy multi-head causal transformer: embeddings, attention, forward pass and
//! greedy decoding with attention intervention points.

pub mod attention;
pub mod decode;
pub mod forward;
pub mod model;
pub mod snapshot;
pub mod tokens;

pub use attention::{compute_head_attention, softmax_rows, AttentionMatrix, HeadId, STOCHASTIC_TOL};
pub use decode::{generate_tokens, DecodeTrace, StepRecord};
pub use forward::{
    argmax, empty_context_distribution, forward, forward_decode_step, position_distributions, softmax,
    AttentionHook, AttentionOverrides, ForwardControl, ForwardOutput, IdentityHook, StepOutput,
};
pub use model::{Activation, HeadWeights, LayerWeights, ModelConfig, TinyModel};
pub use tokens::{modality_string, parse_modality_string, Modality, TokenSequence};
