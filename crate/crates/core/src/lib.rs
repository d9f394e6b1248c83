// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-imbalance analysis and decode-time rectification on a toy
//! multi-head causal transformer.

// `!(x > 0.0)` is the NaN-rejecting form used for input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod air;
pub mod attn;
pub mod attribution;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numfmt;
pub mod theory;

pub use attn::{
    AttentionMatrix, DecodeTrace, HeadId, Modality, ModelConfig, TinyModel, TokenSequence,
};
pub use error::{Error, Result};
