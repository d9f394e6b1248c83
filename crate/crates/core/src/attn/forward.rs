// SPDX-License-Identifier: MIT OR Apache-2.0

//! The stacked-block forward pass and its intervention points.
//!
//! Each layer computes, per head, `A = softmax(X^T W_QK X / sqrt(d))` with a
//! causal mask, mixes values `U_h = W_V^h X A^T` into the head's slice of the
//! concatenated output, then applies
//!
//! ```text
//! Z = U + X        (normalised when layer_norm is on)
//! H = W_F2 act(W_F1 Z)
//! X' = H + Z       (normalised when layer_norm is on)
//! ```
//!
//! Three intervention points sit between the softmax and the value mixing:
//! explicit per-head overrides, an [`AttentionHook`], and erasure of a single
//! head's mixed output.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::attn::attention::{qk_scores, softmax_rows};
use crate::attn::{AttentionMatrix, HeadId, Modality, TinyModel, TokenSequence};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Rewrites attention matrices between the softmax and value mixing.
///
/// Called once per head per forward pass, in layer-major order. Implementors
/// return the matrix to use; returning the input unchanged is a no-op.
pub trait AttentionHook {
    /// Notifies the hook that decoding step `step` is about to run.
    fn begin_step(&mut self, _step: usize) {}

    fn rewrite(
        &mut self,
        head: HeadId,
        attn: AttentionMatrix,
        modalities: &[Modality],
    ) -> Result<AttentionMatrix>;
}

/// Hook that returns every matrix untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn rewrite(&mut self, _: HeadId, attn: AttentionMatrix, _: &[Modality]) -> Result<AttentionMatrix> {
        Ok(attn)
    }
}

pub type AttentionOverrides = BTreeMap<HeadId, AttentionMatrix>;

/// Intervention settings for one forward pass. Overrides win over the hook.
#[derive(Default)]
pub struct ForwardControl<'a> {
    overrides: Option<&'a AttentionOverrides>,
    hook: Option<&'a mut dyn AttentionHook>,
    erased: Option<HeadId>,
}

impl<'a> ForwardControl<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_overrides(mut self, overrides: &'a AttentionOverrides) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn with_hook(mut self, hook: &'a mut dyn AttentionHook) -> Self {
        self.hook = Some(hook);
        self
    }

    /// Zero the mixed output of `head` before concatenation.
    pub fn with_erased(mut self, head: HeadId) -> Self {
        self.erased = Some(head);
        self
    }
}

/// Final hidden states (`d × T`) and every attention matrix used for value
/// mixing, in layer-major order.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub hidden: Array2<f64>,
    pub attentions: Vec<AttentionMatrix>,
}

/// Next-token distribution plus the attention matrices of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub distribution: Vec<f64>,
    pub attentions: Vec<AttentionMatrix>,
}

pub fn forward(model: &TinyModel, x: &TokenSequence, ctl: &mut ForwardControl<'_>) -> Result<ForwardOutput> {
    let d = model.d();
    let t = x.len();
    if t == 0 {
        return Err(Error::InvalidArgument("forward pass over an empty sequence".into()));
    }
    if x.dim() != d {
        return Err(Error::shape("token embeddings", d, x.dim()));
    }
    if let Some(erased) = ctl.erased {
        model.check_head(erased)?;
    }
    let layer_norm = model.config.layer_norm;
    let mut hidden = x.embeddings().clone();
    let mut attentions = Vec::with_capacity(model.config.total_heads());

    for (l, layer) in model.layers.iter().enumerate() {
        let mut mixed = Array2::<f64>::zeros((d, t));
        for (h, weights) in layer.heads.iter().enumerate() {
            let id = HeadId::new(l, h);
            let attn = match ctl.overrides.and_then(|o| o.get(&id)) {
                Some(over) => {
                    if over.len() != t {
                        return Err(Error::shape(
                            "attention override",
                            format!("{t}x{t}"),
                            format!("{0}x{0}", over.len()),
                        ));
                    }
                    over.clone().with_head(id)
                }
                None => {
                    let computed =
                        softmax_rows(&qk_scores(hidden.view(), &weights.w_qk), true)?.with_head(id);
                    match ctl.hook.as_mut() {
                        Some(hook) => {
                            let out = hook.rewrite(id, computed, x.modalities())?;
                            if out.len() != t {
                                return Err(Error::shape(
                                    "hook output",
                                    format!("{t}x{t}"),
                                    format!("{0}x{0}", out.len()),
                                ));
                            }
                            out.with_head(id)
                        }
                        None => computed,
                    }
                }
            };
            if ctl.erased != Some(id) {
                let values = weights.w_v.dot(&hidden);
                let u = values.dot(&attn.weights().t());
                mixed.slice_mut(s![model.head_slice(h), ..]).assign(&u);
            }
            attentions.push(attn);
        }

        let mut z = mixed + &hidden;
        if layer_norm {
            layer_norm_columns(&mut z);
        }
        let act = layer.w_f1.dot(&z).mapv(|v| layer.activation.apply(v));
        let mut next = layer.w_f2.dot(&act) + &z;
        if layer_norm {
            layer_norm_columns(&mut next);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivations { layer: l });
        }
        hidden = next;
    }
    Ok(ForwardOutput { hidden, attentions })
}

/// One decoding step: the next-token distribution at the last position.
pub fn forward_decode_step(
    model: &TinyModel,
    x: &TokenSequence,
    overrides: Option<&AttentionOverrides>,
) -> Result<StepOutput> {
    let mut ctl = ForwardControl::new();
    if let Some(o) = overrides {
        ctl = ctl.with_overrides(o);
    }
    let out = forward(model, x, &mut ctl)?;
    let last = out.hidden.ncols() - 1;
    Ok(StepOutput {
        distribution: softmax(model.logits(out.hidden.column(last)).as_slice().expect("contiguous")),
        attentions: out.attentions,
    })
}

/// Next-token distribution at every position of `x` (teacher forcing).
pub fn position_distributions(
    model: &TinyModel,
    x: &TokenSequence,
    ctl: &mut ForwardControl<'_>,
) -> Result<Vec<Vec<f64>>> {
    let out = forward(model, x, ctl)?;
    Ok(out
        .hidden
        .columns()
        .into_iter()
        .map(|col| softmax(model.logits(col).as_slice().expect("contiguous")))
        .collect())
}

/// Distribution for an empty context: the hidden state is zero, so every
/// logit is zero and the distribution is uniform.
pub fn empty_context_distribution(model: &TinyModel) -> Vec<f64> {
    vec![1.0 / model.vocab() as f64; model.vocab()]
}

fn layer_norm_columns(m: &mut Array2<f64>) {
    let d = m.nrows() as f64;
    for mut col in m.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / d;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        col.mapv_inplace(|v| (v - mean) * inv);
    }
}

/// Max-subtracted softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
