// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use crate::attn::{position_distributions, DecodeTrace, ForwardControl, HeadId, TinyModel, TokenSequence};
use crate::error::{Error, Result};

/// Largest allowed gap between a trace's recorded distribution and the
/// teacher-forced replay of the same prefix.
pub const REPLAY_TOL: f64 = 1e-9;

/// A validated head erasure: the head's mixed value output is replaced by
/// zeros before concatenation, at every position and step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Erasure {
    head: HeadId,
}

pub fn erase_head(model: &TinyModel, head: HeadId) -> Result<Erasure> {
    model.check_head(head)?;
    Ok(Erasure { head })
}

impl Erasure {
    pub fn head(&self) -> HeadId {
        self.head
    }

    pub fn control(&self) -> ForwardControl<'static> {
        ForwardControl::new().with_erased(self.head)
    }

    /// Next-token distribution at every position of `x` with the head erased.
    pub fn position_distributions(&self, model: &TinyModel, x: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        position_distributions(model, x, &mut self.control())
    }
}

/// Teacher-forced probabilities of each generated token, checked against
/// the trace. Position `prompt_len + s - 1` predicts step `s`.
fn realized_probs(
    dists: &[Vec<f64>],
    trace: &DecodeTrace,
    check: bool,
) -> Result<Vec<f64>> {
    trace
        .steps
        .iter()
        .enumerate()
        .map(|(s, rec)| {
            let dist = &dists[trace.prompt_len + s - 1];
            if check {
                let dev = dist
                    .iter()
                    .zip(&rec.distribution)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if dist.len() != rec.distribution.len() || dev > REPLAY_TOL {
                    return Err(Error::TraceMismatch {
                        step: s,
                        detail: format!("replayed distribution deviates by {dev:e}"),
                    });
                }
            }
            Ok(dist[rec.token_id])
        })
        .collect()
}

fn check_trace_shape(model: &TinyModel, trace: &DecodeTrace) -> Result<()> {
    let seq = &trace.final_sequence;
    if trace.prompt_len == 0 || seq.len() != trace.prompt_len + trace.steps.len() {
        return Err(Error::TraceMismatch {
            step: 0,
            detail: format!(
                "sequence length {} does not equal prompt {} plus {} steps",
                seq.len(),
                trace.prompt_len,
                trace.steps.len()
            ),
        });
    }
    for (s, rec) in trace.steps.iter().enumerate() {
        if seq.token_ids()[trace.prompt_len + s] != Some(rec.token_id) || rec.token_id >= model.vocab() {
            return Err(Error::TraceMismatch {
                step: s,
                detail: "recorded token is not the appended token".into(),
            });
        }
    }
    Ok(())
}

/// Intact-model probability of every generated token, replayed with teacher
/// forcing and verified against the trace.
pub fn replay_probs(model: &TinyModel, trace: &DecodeTrace) -> Result<Vec<f64>> {
    check_trace_shape(model, trace)?;
    let dists = position_distributions(model, &trace.final_sequence, &mut ForwardControl::new())?;
    realized_probs(&dists, trace, true)
}

/// `P_M(y_t) - P_{M without head}(y_t)` for every generated step of the
/// trace, both terms scored on the trace's own prefixes.
pub fn delta_prob_per_token(model: &TinyModel, trace: &DecodeTrace, head: HeadId) -> Result<Vec<f64>> {
    let intact = replay_probs(model, trace)?;
    erased_deltas(model, trace, &intact, erase_head(model, head)?)
}

fn erased_deltas(model: &TinyModel, trace: &DecodeTrace, intact: &[f64], erasure: Erasure) -> Result<Vec<f64>> {
    let dists = erasure.position_distributions(model, &trace.final_sequence)?;
    let erased = realized_probs(&dists, trace, false)?;
    Ok(intact.iter().zip(erased).map(|(p, q)| p - q).collect())
}

/// Per-step deltas for every (head, trace) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTable {
    pub heads: Vec<HeadId>,
    /// `deltas[h][k][s]`: head `heads[h]`, trace `k`, step `s`.
    pub deltas: Vec<Vec<Vec<f64>>>,
}

impl DeltaTable {
    pub fn compute(model: &TinyModel, traces: &[DecodeTrace], heads: &[HeadId]) -> Result<Self> {
        let intact = traces
            .iter()
            .map(|t| replay_probs(model, t))
            .collect::<Result<Vec<_>>>()?;
        let erasures = heads
            .iter()
            .map(|&h| erase_head(model, h))
            .collect::<Result<Vec<_>>>()?;
        let deltas = erasures
            .par_iter()
            .map(|&e| {
                traces
                    .iter()
                    .zip(&intact)
                    .map(|(t, p)| erased_deltas(model, t, p, e))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads: heads.to_vec(),
            deltas,
        })
    }
}
