// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decode-time attention rectification: a one-off `W_QK` rescale of the
//! sensitive heads, then per step a modality reallocation of text-heavy
//! heads followed by zero-trace projection, energy rescale and shrinkage.

mod decode;
mod ops;

pub use decode::{decode_with_air, triggers_to_csv, AirHook, AirTrace, TriggerRecord};
pub use ops::{
    air_apply, modality_reallocate, rectify_model, rescale_wqk, text_attention_fraction,
    text_attention_fraction_detail, variance_regularize, variance_regularize_steps, AirConfig, AirOutcome,
    RegularizeSteps, RescaleDiagnostics, TextFraction, WQK_LOG_OFFSET,
};
