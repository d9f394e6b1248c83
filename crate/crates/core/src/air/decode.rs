// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::air::{air_apply, AirConfig};
use crate::attn::{generate_tokens, AttentionHook, AttentionMatrix, DecodeTrace, HeadId, Modality, TinyModel, TokenSequence};
use crate::error::Result;
use crate::numfmt::{num, opt_num};

/// One sensitive head at one decoding step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub pre_fraction: f64,
    pub post_reallocation_fraction: Option<f64>,
    pub final_fraction: f64,
    /// Whether reallocation ran.
    pub applied: bool,
}

/// Attention hook running the rectification on sensitive heads and logging
/// every decision.
#[derive(Clone, Debug)]
pub struct AirHook {
    cfg: AirConfig,
    step: usize,
    log: Vec<TriggerRecord>,
}

impl AirHook {
    pub fn new(cfg: AirConfig) -> Self {
        Self {
            cfg,
            step: 0,
            log: Vec::new(),
        }
    }

    pub fn into_log(self) -> Vec<TriggerRecord> {
        self.log
    }
}

impl AttentionHook for AirHook {
    fn begin_step(&mut self, step: usize) {
        self.step = step;
    }

    fn rewrite(&mut self, head: HeadId, attn: AttentionMatrix, modalities: &[Modality]) -> Result<AttentionMatrix> {
        if !self.cfg.sensitive_heads.contains(&head) {
            return Ok(attn);
        }
        let out = air_apply(attn, modalities, &self.cfg, head)?;
        self.log.push(TriggerRecord {
            step: self.step,
            layer: head.layer,
            head: head.head,
            pre_fraction: out.pre_fraction,
            post_reallocation_fraction: out.post_reallocation_fraction,
            final_fraction: out.final_fraction,
            applied: out.triggered,
        });
        Ok(out.matrix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AirTrace {
    pub trace: DecodeTrace,
    pub triggers: Vec<TriggerRecord>,
}

impl AirTrace {
    /// Steps at which `head` was reallocated.
    pub fn triggered_steps(&self, head: HeadId) -> Vec<usize> {
        self.triggers
            .iter()
            .filter(|r| r.applied && r.layer == head.layer && r.head == head.head)
            .map(|r| r.step)
            .collect()
    }
}

/// Greedy decoding with the rectification hook on every step.
///
/// `model` must already carry the rescaled `W_QK` of the sensitive heads
/// (see [`crate::air::rectify_model`]).
pub fn decode_with_air(
    model: &TinyModel,
    prompt: &TokenSequence,
    cfg: &AirConfig,
    max_new_tokens: usize,
) -> Result<AirTrace> {
    cfg.validate(Some(model))?;
    let mut hook = AirHook::new(cfg.clone());
    let trace = generate_tokens(model, prompt, max_new_tokens, Some(&mut hook))?;
    Ok(AirTrace {
        trace,
        triggers: hook.into_log(),
    })
}

pub fn triggers_to_csv(records: &[TriggerRecord]) -> String {
    let mut out = String::from("step,layer,head,pre_fraction,post_reallocation_fraction,final_fraction,applied\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.layer,
            r.head,
            num(r.pre_fraction),
            opt_num(r.post_reallocation_fraction),
            num(r.final_fraction),
            r.applied
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::air::rectify_model;
    use crate::attn::ModelConfig;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup() -> (TinyModel, TokenSequence) {
        let m = TinyModel::new(ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            vocab: 16,
            seed: 21,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = Array2::from_shape_simple_fn((8, 6), || StandardNormal.sample(&mut rng));
        let mods = crate::attn::parse_modality_string("vvvttt").unwrap();
        (m, TokenSequence::new(emb, mods, vec![None; 6]).unwrap())
    }

    #[test]
    fn empty_sensitive_set_matches_plain_decoding() {
        let (m, p) = setup();
        let plain = generate_tokens(&m, &p, 5, None).unwrap();
        let air = decode_with_air(&m, &p, &AirConfig::default(), 5).unwrap();
        assert_eq!(air.trace, plain);
        assert!(air.triggers.is_empty());
    }

    #[test]
    fn logs_one_record_per_sensitive_head_per_step() {
        let (m, p) = setup();
        let cfg = AirConfig {
            sensitive_heads: [HeadId::new(0, 0), HeadId::new(1, 1)].into(),
            tau_text: 0.0,
            ..AirConfig::default()
        };
        let (r, diags) = rectify_model(&m, &cfg).unwrap();
        assert_eq!(diags.len(), 2);
        let out = decode_with_air(&r, &p, &cfg, 4).unwrap();
        assert_eq!(out.triggers.len(), 8);
        assert!(out.triggers.iter().all(|t| t.applied));
        assert_eq!(out.triggered_steps(HeadId::new(1, 1)), vec![0, 1, 2, 3]);
        for rec in &out.trace.steps {
            for a in &rec.attentions {
                assert!(a.is_causal());
                let sens = cfg.sensitive_heads.contains(&a.head().unwrap());
                assert_eq!(a.row_stochastic(), !sens);
            }
        }
        let csv = triggers_to_csv(&out.triggers);
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn untouched_heads_are_bitwise_equal_to_plain_pass() {
        let (m, p) = setup();
        let cfg = AirConfig {
            sensitive_heads: [HeadId::new(1, 0)].into(),
            ..AirConfig::default()
        };
        let air = decode_with_air(&m, &p, &cfg, 1).unwrap();
        let plain = generate_tokens(&m, &p, 1, None).unwrap();
        // layer 0 precedes the intervention, so its matrices must be identical
        for (a, b) in air.trace.steps[0].attentions.iter().zip(&plain.steps[0].attentions) {
            if a.head().unwrap().layer == 0 {
                assert_eq!(a, b);
            }
        }
    }
}
