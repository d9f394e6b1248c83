// SPDX-License-Identifier: MIT OR Apache-2.0

//! Erasure-based head attribution: per-token probability changes, the
//! sensitivity difference and effect size per head, and head ranking.

mod effect;
mod erase;

pub use effect::{
    effect_from_groups, effect_grid_csv, effects_from_table, effects_to_csv, nearest_rank_quantile,
    permutation_max_abs_effect, rank_heads, sensitivity_and_effect, AverageSummary, HeadEffect, HeadRanking,
    InsensitiveSelector, TokenLabels,
};
pub use erase::{delta_prob_per_token, erase_head, replay_probs, DeltaTable, Erasure, REPLAY_TOL};
