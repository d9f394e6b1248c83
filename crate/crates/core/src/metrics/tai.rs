// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::attn::{forward, AttentionHook, AttentionMatrix, ForwardControl, IdentityHook, TinyModel, TokenSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// Single-token removal log-probability gap.
    Ablation,
    /// Scores supplied by the caller.
    OracleInjected,
}

/// Per-token contribution scores `c_j >= 0` of a context toward predicting
/// the token that follows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionProfile {
    scores: Vec<f64>,
    estimator: Estimator,
    /// Token whose prediction was scored, when known.
    target_token: Option<usize>,
}

impl ContributionProfile {
    /// Wraps caller-supplied scores unchanged.
    pub fn oracle(scores: Vec<f64>) -> Result<Self> {
        if let Some(k) = scores.iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "contribution {k} is {} (must be finite and >= 0)",
                scores[k]
            )));
        }
        Ok(Self {
            scores,
            estimator: Estimator::OracleInjected,
            target_token: None,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn target_token(&self) -> Option<usize> {
        self.target_token
    }

    /// Context length `i`.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

/// `log P(y | ctx)` from the last position; the empty context scores every
/// token at `-ln V`.
pub fn next_token_log_prob(model: &TinyModel, ctx: &TokenSequence, y: usize) -> Result<f64> {
    next_token_log_prob_with(model, ctx, y, None)
}

/// As [`next_token_log_prob`], with an attention hook on the forward pass.
pub fn next_token_log_prob_with(
    model: &TinyModel,
    ctx: &TokenSequence,
    y: usize,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<f64> {
    match hook {
        Some(h) => log_prob(model, ctx, y, h),
        None => log_prob(model, ctx, y, &mut IdentityHook),
    }
}

fn log_prob(model: &TinyModel, ctx: &TokenSequence, y: usize, hook: &mut dyn AttentionHook) -> Result<f64> {
    if y >= model.vocab() {
        return Err(Error::InvalidArgument(format!("target token {y} outside vocabulary")));
    }
    if ctx.is_empty() {
        return Ok(-(model.vocab() as f64).ln());
    }
    let logits = last_logits(model, ctx, hook)?;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits[y] - lse)
}

fn last_logits(model: &TinyModel, ctx: &TokenSequence, hook: &mut dyn AttentionHook) -> Result<Vec<f64>> {
    let mut ctl = ForwardControl::new().with_hook(hook);
    let out = forward(model, ctx, &mut ctl)?;
    Ok(model.logits(out.hidden.column(out.hidden.ncols() - 1)).to_vec())
}

/// Ablation contributions of the first `context_len` tokens of `x` toward
/// the token at position `context_len`.
///
/// The target is the recorded id at that position when `context_len < T`,
/// and the greedy next token when `context_len == T`. Each score is
/// `max(0, log P(y | ctx) - log P(y | ctx without j))`.
pub fn estimate_contributions(
    model: &TinyModel,
    x: &TokenSequence,
    context_len: usize,
) -> Result<ContributionProfile> {
    estimate_contributions_with(model, x, context_len, None)
}

/// As [`estimate_contributions`], with `hook` applied to every forward pass
/// (used to score a rectified decoder).
pub fn estimate_contributions_with(
    model: &TinyModel,
    x: &TokenSequence,
    context_len: usize,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<ContributionProfile> {
    match hook {
        Some(h) => contributions(model, x, context_len, h),
        None => contributions(model, x, context_len, &mut IdentityHook),
    }
}

fn contributions(
    model: &TinyModel,
    x: &TokenSequence,
    context_len: usize,
    hook: &mut dyn AttentionHook,
) -> Result<ContributionProfile> {
    if context_len == 0 {
        return Err(Error::InvalidArgument("contribution context is empty".into()));
    }
    if context_len > x.len() {
        return Err(Error::InvalidArgument(format!(
            "context length {context_len} exceeds sequence length {}",
            x.len()
        )));
    }
    let ctx = x.prefix(context_len);
    let y = if context_len < x.len() {
        x.token_ids()[context_len].ok_or_else(|| {
            Error::InvalidArgument(format!("position {context_len} has no token id to score"))
        })?
    } else {
        crate::attn::argmax(&last_logits(model, &ctx, hook)?)
    };
    let full = log_prob(model, &ctx, y, hook)?;
    let scores = (0..context_len)
        .map(|j| Ok((full - log_prob(model, &ctx.without(j), y, hook)?).max(0.0)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContributionProfile {
        scores,
        estimator: Estimator::Ablation,
        target_token: Some(y),
    })
}

/// Token-wise attention imbalance of token `j` (zero-based).
///
/// `A(x_j)` is the full column mass of `a`; the normaliser sums column
/// masses over the profile's context. `a` may cover more positions than the
/// profile.
pub fn tai(a: &AttentionMatrix, profile: &ContributionProfile, j: usize) -> Result<f64> {
    let (share, total_c) = attention_share(a, profile)?;
    if j >= profile.len() {
        return Err(Error::InvalidArgument(format!(
            "token {j} outside context of {}",
            profile.len()
        )));
    }
    let c = profile.scores[j];
    if c <= 0.0 {
        return Err(Error::ZeroContribution { token: j });
    }
    Ok(share[j] * total_c / c)
}

/// TAI of every context token; `None` where the contribution is zero.
pub fn tai_all(a: &AttentionMatrix, profile: &ContributionProfile) -> Result<Vec<Option<f64>>> {
    let (share, total_c) = attention_share(a, profile)?;
    Ok(profile
        .scores
        .iter()
        .zip(share)
        .map(|(&c, s)| (c > 0.0).then(|| s * total_c / c))
        .collect())
}

fn attention_share(a: &AttentionMatrix, profile: &ContributionProfile) -> Result<(Vec<f64>, f64)> {
    let i = profile.len();
    if i == 0 || i > a.len() {
        return Err(Error::shape("contribution profile", format!("1..={}", a.len()), i));
    }
    let masses = a.column_masses();
    let total_a: f64 = masses[..i].iter().sum();
    if total_a <= 0.0 {
        return Err(Error::ZeroAttention);
    }
    let total_c = profile.total();
    Ok((masses[..i].iter().map(|m| m / total_a).collect(), total_c))
}

/// `mean + population std` of per-example maximum TAI values.
pub fn tai_threshold(per_example_max_tai: &[f64]) -> Result<f64> {
    if per_example_max_tai.is_empty() {
        return Err(Error::InvalidArgument("threshold needs at least one value".into()));
    }
    let n = per_example_max_tai.len() as f64;
    let mean = per_example_max_tai.iter().sum::<f64>() / n;
    let var = per_example_max_tai.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(mean + var.sqrt())
}

/// Indices whose TAI strictly exceeds `tau`, in position order.
pub fn detect_imbalanced_tokens(tai: &[f64], tau: f64) -> Vec<usize> {
    tai.iter()
        .enumerate()
        .filter(|(_, &v)| v > tau)
        .map(|(i, _)| i)
        .collect()
}

/// As [`detect_imbalanced_tokens`], skipping undefined entries.
pub fn detect_defined(tai: &[Option<f64>], tau: f64) -> Vec<usize> {
    tai.iter()
        .enumerate()
        .filter(|(_, v)| matches!(v, Some(v) if *v > tau))
        .map(|(i, _)| i)
        .collect()
}
