// SPDX-License-Identifier: MIT OR Apache-2.0

//! Modality-wise and token-wise attention imbalance, thresholds,
//! co-occurrence statistics and attention-map similarity.

mod mass;
mod report;
mod tai;

pub use mass::{find_head, layer_mean_attention, mai, mean_attention, modality_attention_mass, ModalityMass};
pub use report::{
    attention_cosine_similarity, cooccurrence_stats, CooccurrenceHit, CooccurrenceStats, ImbalanceReport,
    DEFAULT_WINDOW,
};
pub use tai::{
    detect_defined, detect_imbalanced_tokens, estimate_contributions, estimate_contributions_with, next_token_log_prob,
    next_token_log_prob_with, tai, tai_all,
    tai_threshold, ContributionProfile, Estimator,
};
