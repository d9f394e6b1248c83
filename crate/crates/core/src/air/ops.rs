// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionMatrix, HeadId, Modality, TinyModel};
use crate::error::{Error, Result};

/// Constant added to `tr(W_QK^2)` inside the rescale logarithm.
pub const WQK_LOG_OFFSET: f64 = 1e-6;

/// Rectification settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AirConfig {
    pub sensitive_heads: BTreeSet<HeadId>,
    /// Per-text-row fraction of attention on text keys above which a head
    /// is reallocated.
    pub tau_text: f64,
    /// Text-column factor, in `[0, 1]`.
    pub lambda: f64,
    /// Visual-column factor, `> 1` for a real intervention.
    pub gamma: f64,
    /// `W_QK` rescale coefficient.
    pub xi: f64,
    /// Shrinkage weight, in `[0, 1]`.
    pub beta: f64,
    pub epsilon: f64,
    /// Floor for `|log(tr(W_QK^2) + 1e-6)|` in the rescale.
    pub wqk_log_guard: f64,
    /// Renormalise rows of the rectified matrix to sum to one.
    pub renormalize: bool,
    /// Zero the entries above the diagonal of the rectified matrix so that
    /// no position reads from later positions.
    pub causal_remask: bool,
}

impl Default for AirConfig {
    fn default() -> Self {
        Self {
            sensitive_heads: BTreeSet::new(),
            tau_text: 0.3,
            lambda: 0.1,
            gamma: 3.5,
            xi: 0.01,
            beta: 0.3,
            epsilon: 1e-8,
            wqk_log_guard: 1e-3,
            renormalize: false,
            causal_remask: true,
        }
    }
}

impl AirConfig {
    /// Identity reallocation, no shrinkage and no rescale.
    pub fn neutral(sensitive_heads: BTreeSet<HeadId>) -> Self {
        Self {
            sensitive_heads,
            lambda: 1.0,
            gamma: 1.0,
            xi: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    /// Checks parameter ranges. `gamma = 1` is accepted so that the neutral
    /// configuration can be expressed; `gamma < 1` is not.
    pub fn validate(&self, model: Option<&TinyModel>) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and >= 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.wqk_log_guard > 0.0 && self.wqk_log_guard.is_finite()) {
            return bad("wqk_log_guard must be positive");
        }
        if !self.tau_text.is_finite() || !self.xi.is_finite() {
            return bad("tau_text and xi must be finite");
        }
        if let Some(m) = model {
            for &h in &self.sensitive_heads {
                m.check_head(h)?;
            }
        }
        Ok(())
    }
}

/// What [`rescale_wqk`] did to one matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleDiagnostics {
    pub head: Option<HeadId>,
    pub trace_sq: f64,
    /// `log(tr(W^2) + 1e-6)` before guarding; `-inf` when the argument is
    /// not positive.
    pub raw_log: f64,
    pub used_log: f64,
    pub guarded: bool,
    pub scale: f64,
}

/// `s · W` with `s = 1 - xi / log(tr(W^2) + 1e-6)`.
///
/// A non-positive log argument is clamped to the smallest positive double,
/// and `|log|` is floored at `guard` keeping its sign.
pub fn rescale_wqk(w_qk: &Array2<f64>, xi: f64, guard: f64) -> Result<(Array2<f64>, RescaleDiagnostics)> {
    let (r, c) = w_qk.dim();
    if r != c {
        return Err(Error::shape("W_QK", format!("{r}x{r}"), format!("{r}x{c}")));
    }
    if w_qk.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("W_QK has non-finite entries".into()));
    }
    // tr(W^2) = sum_ij W_ij W_ji
    let trace_sq: f64 = w_qk.indexed_iter().map(|((i, j), v)| v * w_qk[[j, i]]).sum();
    let arg = trace_sq + WQK_LOG_OFFSET;
    let raw_log = if arg > 0.0 { arg.ln() } else { f64::NEG_INFINITY };
    let mut used_log = arg.max(f64::MIN_POSITIVE).ln();
    let guarded = used_log.abs() < guard;
    if guarded {
        used_log = if used_log < 0.0 { -guard } else { guard };
        log::warn!("W_QK rescale log term {raw_log:e} floored to {used_log:e}");
    }
    let scale = 1.0 - xi / used_log;
    Ok((
        w_qk * scale,
        RescaleDiagnostics {
            head: None,
            trace_sq,
            raw_log,
            used_log,
            guarded,
            scale,
        },
    ))
}

/// Copy of `model` with every sensitive head's `W_QK` rescaled once.
pub fn rectify_model(model: &TinyModel, cfg: &AirConfig) -> Result<(TinyModel, Vec<RescaleDiagnostics>)> {
    cfg.validate(Some(model))?;
    let mut out = model.clone();
    let mut diags = Vec::with_capacity(cfg.sensitive_heads.len());
    for &id in &cfg.sensitive_heads {
        let head = out.head_mut(id)?;
        let (w, mut d) = rescale_wqk(&head.w_qk, cfg.xi, cfg.wqk_log_guard)?;
        head.w_qk = w;
        d.head = Some(id);
        diags.push(d);
    }
    Ok((out, diags))
}

/// Text-to-text attention of the text rows: the raw sum, the row count and
/// the share of the text rows' total mass that lands on text keys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFraction {
    pub raw: f64,
    pub text_rows: usize,
    /// Total mass of the text rows; equals `text_rows` for a
    /// row-stochastic matrix.
    pub row_mass: f64,
    pub fraction: f64,
}

/// `sum_{i,j text} a[i][j]` over the total mass of the text rows, which is
/// the per-text-row average for a row-stochastic matrix. Falls back to the
/// row count when that mass is not positive; zero when there are no text
/// rows.
pub fn text_attention_fraction_detail(a: &AttentionMatrix, labels: &[Modality]) -> Result<TextFraction> {
    if labels.len() != a.len() {
        return Err(Error::shape("modality labels", a.len(), labels.len()));
    }
    let text: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Modality::Text).collect();
    if text.is_empty() {
        log::debug!("text fraction requested for a sequence without text rows");
        return Ok(TextFraction {
            raw: 0.0,
            text_rows: 0,
            row_mass: 0.0,
            fraction: 0.0,
        });
    }
    let w = a.weights();
    let raw: f64 = text.iter().map(|&i| text.iter().map(|&j| w[[i, j]]).sum::<f64>()).sum();
    let row_mass: f64 = text.iter().map(|&i| w.row(i).sum()).sum();
    let denom = if row_mass > 0.0 { row_mass } else { text.len() as f64 };
    Ok(TextFraction {
        raw,
        text_rows: text.len(),
        row_mass,
        fraction: raw / denom,
    })
}

pub fn text_attention_fraction(a: &AttentionMatrix, labels: &[Modality]) -> Result<f64> {
    Ok(text_attention_fraction_detail(a, labels)?.fraction)
}

/// Scales text columns by `lambda` and visual columns by `gamma`, every row.
pub fn modality_reallocate(a: &AttentionMatrix, labels: &[Modality], lambda: f64, gamma: f64) -> Result<AttentionMatrix> {
    if labels.len() != a.len() {
        return Err(Error::shape("modality labels", a.len(), labels.len()));
    }
    let mut w = a.weights().clone();
    for (mut col, m) in w.columns_mut().into_iter().zip(labels) {
        let f = match m {
            Modality::Text => lambda,
            Modality::Visual => gamma,
        };
        col.mapv_inplace(|v| v * f);
    }
    Ok(AttentionMatrix::from_parts(w, a.head(), false))
}

/// Intermediate matrices of [`variance_regularize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizeSteps {
    /// Zero-trace projection.
    pub projected: Array2<f64>,
    /// Projection rescaled to the input's Frobenius energy.
    pub rescaled: Array2<f64>,
    /// Shrinkage toward the mean entry.
    pub shrunk: Array2<f64>,
}

pub fn variance_regularize_steps(a: &Array2<f64>, beta: f64, epsilon: f64) -> Result<RegularizeSteps> {
    let (n, c) = a.dim();
    if n != c {
        return Err(Error::shape("regularized matrix", format!("{n}x{n}"), format!("{n}x{c}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot regularize an empty matrix".into()));
    }
    let shift = a.diag().sum() / n as f64;
    let mut projected = a.clone();
    projected.diag_mut().mapv_inplace(|v| v - shift);
    let energy_in: f64 = a.iter().map(|v| v * v).sum();
    let energy_proj: f64 = projected.iter().map(|v| v * v).sum();
    let rescaled = &projected * (energy_in / (energy_proj + epsilon)).sqrt();
    let mean = rescaled.sum() / (n * n) as f64;
    let shrunk = rescaled.mapv(|v| (1.0 - beta) * v + beta * mean);
    Ok(RegularizeSteps {
        projected,
        rescaled,
        shrunk,
    })
}

/// Zero-trace projection, Frobenius-energy rescale and shrinkage.
pub fn variance_regularize(a: &AttentionMatrix, beta: f64, epsilon: f64) -> Result<AttentionMatrix> {
    let steps = variance_regularize_steps(a.weights(), beta, epsilon)?;
    Ok(AttentionMatrix::from_parts(steps.shrunk, a.head(), false))
}

/// Result of rectifying one head's matrix at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AirOutcome {
    pub matrix: AttentionMatrix,
    /// Whether the head is in the sensitive set at all.
    pub applied: bool,
    /// Whether reallocation ran.
    pub triggered: bool,
    pub pre_fraction: f64,
    /// Text fraction right after reallocation, when it ran.
    pub post_reallocation_fraction: Option<f64>,
    /// Text fraction of the matrix used for value mixing.
    pub final_fraction: f64,
}

/// Rectifies `a` if `head` is sensitive; other heads pass through untouched.
pub fn air_apply(a: AttentionMatrix, labels: &[Modality], cfg: &AirConfig, head: HeadId) -> Result<AirOutcome> {
    let pre = text_attention_fraction(&a, labels)?;
    if !cfg.sensitive_heads.contains(&head) {
        return Ok(AirOutcome {
            matrix: a,
            applied: false,
            triggered: false,
            pre_fraction: pre,
            post_reallocation_fraction: None,
            final_fraction: pre,
        });
    }
    let triggered = pre > cfg.tau_text;
    let (realloc, post) = if triggered {
        let r = modality_reallocate(&a, labels, cfg.lambda, cfg.gamma)?;
        let f = text_attention_fraction(&r, labels)?;
        (r, Some(f))
    } else {
        (a, None)
    };
    let mut w = variance_regularize_steps(realloc.weights(), cfg.beta, cfg.epsilon)?.shrunk;
    if cfg.causal_remask {
        for ((i, j), v) in w.indexed_iter_mut() {
            if j > i {
                *v = 0.0;
            }
        }
    }
    if cfg.renormalize {
        for mut row in w.rows_mut() {
            let s = row.sum();
            if s.abs() > cfg.epsilon {
                row.mapv_inplace(|v| v / s);
            }
        }
    }
    let matrix = AttentionMatrix::from_parts(w, Some(head), false);
    let final_fraction = text_attention_fraction(&matrix, labels)?;
    Ok(AirOutcome {
        matrix,
        applied: true,
        triggered,
        pre_fraction: pre,
        post_reallocation_fraction: post,
        final_fraction,
    })
}
