// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::attn::forward::{argmax, forward, softmax, AttentionHook, ForwardControl};
use crate::attn::{AttentionMatrix, HeadId, Modality, TinyModel, TokenSequence};
use crate::error::{Error, Result};

/// One generated token with the distribution it was chosen from and every
/// attention matrix used at that step (layer-major).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub token_id: usize,
    pub distribution: Vec<f64>,
    pub attentions: Vec<AttentionMatrix>,
}

impl StepRecord {
    pub fn attention(&self, head: HeadId) -> Option<&AttentionMatrix> {
        self.attentions.iter().find(|a| a.head() == Some(head))
    }
}

/// Result of greedy generation. `final_sequence` holds the prompt followed
/// by every generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub prompt_len: usize,
    pub steps: Vec<StepRecord>,
    pub final_sequence: TokenSequence,
}

impl DecodeTrace {
    pub fn generated_tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.token_id).collect()
    }

    /// Position in `final_sequence` of the token emitted at `step`.
    pub fn position_of_step(&self, step: usize) -> usize {
        self.prompt_len + step
    }

    /// Sequence seen by the model when it produced step `step`.
    pub fn context_at(&self, step: usize) -> TokenSequence {
        self.final_sequence.prefix(self.prompt_len + step)
    }
}

/// Greedy autoregressive generation.
///
/// Each step runs the full forward pass on the current sequence, takes the
/// arg-max token (lowest id on ties) and appends its text embedding. A hook,
/// when given, is told the step index and may replace attention matrices
/// before value mixing.
pub fn generate_tokens(
    model: &TinyModel,
    prompt: &TokenSequence,
    max_new_tokens: usize,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<DecodeTrace> {
    if max_new_tokens == 0 {
        return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("prompt is empty".into()));
    }
    let mut seq = prompt.clone();
    let mut steps = Vec::with_capacity(max_new_tokens);
    for step in 0..max_new_tokens {
        let out = match hook.as_deref_mut() {
            Some(h) => {
                h.begin_step(step);
                forward(model, &seq, &mut ForwardControl::new().with_hook(h))?
            }
            None => forward(model, &seq, &mut ForwardControl::new())?,
        };
        let last = out.hidden.ncols() - 1;
        let logits = model.logits(out.hidden.column(last));
        let distribution = softmax(logits.as_slice().expect("contiguous"));
        let token_id = argmax(&distribution);
        let emb = model.embed_text(token_id)?;
        seq.push(emb.view(), Modality::Text, Some(token_id))?;
        steps.push(StepRecord {
            token_id,
            distribution,
            attentions: out.attentions,
        });
    }
    Ok(DecodeTrace {
        prompt_len: prompt.len(),
        steps,
        final_sequence: seq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::{IdentityHook, ModelConfig};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn setup(seed: u64) -> (TinyModel, TokenSequence) {
        let model = TinyModel::new(ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            vocab: 16,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let emb = Array2::from_shape_simple_fn((8, 4), || StandardNormal.sample(&mut rng));
        let prompt = TokenSequence::new(emb, vec![Modality::Visual; 4], vec![None; 4]).unwrap();
        (model, prompt)
    }

    #[test]
    fn one_step_one_record() {
        let (m, p) = setup(1);
        let trace = generate_tokens(&m, &p, 1, None).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.final_sequence.len(), 5);
        assert_eq!(trace.final_sequence.modalities()[4], Modality::Text);
    }

    #[test]
    fn zero_tokens_rejected() {
        let (m, p) = setup(1);
        assert!(matches!(generate_tokens(&m, &p, 0, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_and_identity_hook_is_noop() {
        let (m, p) = setup(4);
        let a = generate_tokens(&m, &p, 6, None).unwrap();
        let b = generate_tokens(&m, &p, 6, None).unwrap();
        assert_eq!(a, b);
        let mut hook = IdentityHook;
        let c = generate_tokens(&m, &p, 6, Some(&mut hook)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn attention_snapshots_grow() {
        let (m, p) = setup(2);
        let trace = generate_tokens(&m, &p, 4, None).unwrap();
        for (s, rec) in trace.steps.iter().enumerate() {
            assert_eq!(rec.attentions.len(), 4);
            assert!(rec.attentions.iter().all(|a| a.len() == 4 + s && a.is_causal()));
            assert_eq!(rec.token_id, argmax(&rec.distribution));
        }
    }

    #[test]
    fn scaling_readout_keeps_tokens() {
        let (mut m, p) = setup(9);
        let base = generate_tokens(&m, &p, 5, None).unwrap().generated_tokens();
        m.readout.mapv_inplace(|v| v * 3.7);
        assert_eq!(generate_tokens(&m, &p, 5, None).unwrap().generated_tokens(), base);
    }
}
