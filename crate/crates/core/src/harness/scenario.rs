// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded prompts, labels and the planted scenarios.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::air::text_attention_fraction;
use crate::attn::{forward, generate_tokens, DecodeTrace, ForwardControl, HeadId, Modality, TinyModel, TokenSequence};
use crate::attribution::TokenLabels;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, ScenarioKind};

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const PROMPT: u64 = 1;
    pub const LABEL: u64 = 2;
    pub const TAU: u64 = 3;
    pub const PLANT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const THEORY: u64 = 6;
}

/// Trigger feature amplitude of the planted hallucination head.
pub const TRIGGER_AMPLITUDE: f64 = 2.0;

/// Gain adjustments tried when calibrating the planted readout.
pub const MAX_ALPHA_TRIES: usize = 24;
/// Target share of prompt-0 steps emitting the planted token.
pub const EMISSION_RATE: (f64, f64) = (0.25, 0.75);
/// Largest exponent tried by the text-bias strength sweep (`2^0 ..= 2^12`).
pub const MAX_BIAS_EXPONENT: i32 = 12;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `tag` under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ tag) ^ index)
}

/// What was planted, with the baseline measurements that verify it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Plant {
    Random,
    PlantedTextBias {
        target: HeadId,
        strength: f64,
        /// Smallest per-step text fraction of the target head in the
        /// baseline decode of prompt 0.
        baseline_min_text_fraction: f64,
        tau_text: f64,
    },
    PlantedHallucinationHead {
        target: HeadId,
        hallucination_token: usize,
        trigger_token: usize,
        /// Readout gain on the planted output channel.
        alpha: f64,
        /// Steps of the baseline decode of prompt 0 emitting the token.
        baseline_emissions: usize,
        baseline_steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Reserved {
    gate: usize,
    trigger: usize,
    output: usize,
    reference: usize,
}

impl Reserved {
    fn all(self) -> [usize; 4] {
        [self.gate, self.trigger, self.output, self.reference]
    }
}

/// A model plus the rules that generate its prompts and labels.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub model: TinyModel,
    pub plant: Plant,
    cfg: RunConfig,
    reserved: Option<Reserved>,
}

impl Scenario {
    /// Builds and verifies the configured scenario.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let base = TinyModel::new(cfg.model.clone())?;
        let mut sc = Self {
            kind: cfg.scenario.kind,
            model: base,
            plant: Plant::Random,
            cfg: cfg.clone(),
            reserved: None,
        };
        match cfg.scenario.kind {
            ScenarioKind::Random => {}
            ScenarioKind::PlantedTextBias => sc.plant_text_bias()?,
            ScenarioKind::PlantedHallucinationHead => sc.plant_hallucination_head()?,
        }
        Ok(sc)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Head carrying the planted behaviour, if any.
    pub fn target(&self) -> Option<HeadId> {
        match &self.plant {
            Plant::Random => None,
            Plant::PlantedTextBias { target, .. } | Plant::PlantedHallucinationHead { target, .. } => Some(*target),
        }
    }

    pub fn hallucination_token(&self) -> Option<usize> {
        match &self.plant {
            Plant::PlantedHallucinationHead { hallucination_token, .. } => Some(*hallucination_token),
            _ => None,
        }
    }

    fn special_tokens(&self) -> Vec<usize> {
        match &self.plant {
            Plant::PlantedHallucinationHead {
                hallucination_token,
                trigger_token,
                ..
            } => vec![*hallucination_token, *trigger_token],
            _ => Vec::new(),
        }
    }

    /// Prompt number `index` of the main prompt stream.
    pub fn prompt(&self, index: u64) -> Result<TokenSequence> {
        self.prompt_from(derive_seed(self.cfg.prompt.seed, stream::PROMPT, index), index.is_multiple_of(2))
    }

    /// Prompt number `index` of the threshold-calibration stream.
    pub fn tau_prompt(&self, index: u64) -> Result<TokenSequence> {
        self.prompt_from(derive_seed(self.cfg.prompt.seed, stream::TAU, index), index.is_multiple_of(2))
    }

    /// `visual_tokens` noisy visual positions, then `text_tokens` ordinary
    /// vocabulary tokens. In the hallucination scenario `with_trigger` swaps
    /// one text position for the trigger token.
    fn prompt_from(&self, seed: u64, with_trigger: bool) -> Result<TokenSequence> {
        let m = &self.model;
        let (nv, nt) = (self.cfg.prompt.visual_tokens, self.cfg.prompt.text_tokens);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let special = self.special_tokens();
        let ordinary: Vec<usize> = (0..m.vocab()).filter(|t| !special.contains(t)).collect();
        if nt > 0 && ordinary.is_empty() {
            return Err(Error::Config("no ordinary vocabulary tokens left for prompts".into()));
        }
        let mut seq = TokenSequence::empty(m.d());
        for _ in 0..nv {
            let mut e: Array1<f64> = m.modality_row(Modality::Visual).to_owned();
            e.iter_mut().for_each(|v| *v += rng.sample::<f64, _>(StandardNormal));
            if let Some(r) = self.reserved {
                for c in r.all() {
                    e[c] = 0.0;
                }
            }
            seq.push(e.view(), Modality::Visual, None)?;
        }
        let mut ids: Vec<usize> = (0..nt).map(|_| ordinary[rng.random_range(0..ordinary.len())]).collect();
        if let (Plant::PlantedHallucinationHead { trigger_token, .. }, true) = (&self.plant, with_trigger) {
            if nt > 0 {
                let at = rng.random_range(0..nt);
                ids[at] = *trigger_token;
            }
        }
        for id in ids {
            seq.push(m.embed_text(id)?.view(), Modality::Text, Some(id))?;
        }
        Ok(seq)
    }

    /// Labeled (hallucinated) steps of `trace`, the `index`-th of its stream.
    ///
    /// The hallucination scenario labels exactly the steps that emit the
    /// designated token; the others draw each step independently with
    /// probability `label_fraction`.
    pub fn labeled_steps(&self, trace: &DecodeTrace, index: u64) -> Vec<usize> {
        match &self.plant {
            Plant::PlantedHallucinationHead { hallucination_token, .. } => trace
                .steps
                .iter()
                .enumerate()
                .filter(|(_, s)| s.token_id == *hallucination_token)
                .map(|(k, _)| k)
                .collect(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.prompt.seed, stream::LABEL, index));
                let p = self.cfg.scenario.label_fraction;
                (0..trace.steps.len()).filter(|_| rng.random_bool(p)).collect()
            }
        }
    }

    pub fn token_labels(&self, trace: &DecodeTrace, index: u64) -> Result<TokenLabels> {
        let hall = self.labeled_steps(trace, index);
        let non = (0..trace.steps.len()).filter(|s| !hall.contains(s)).collect();
        TokenLabels::new(hall, non)
    }

    /// Rank-one boost `s·ûûᵀ` on the target head, with `û` the normalized
    /// mean text embedding. `s` sweeps powers of two unless configured.
    fn plant_text_bias(&mut self) -> Result<()> {
        let target = self.cfg.scenario.target;
        self.model.check_head(target)?;
        let v = self.model.vocab();
        let mut mean = Array1::<f64>::zeros(self.model.d());
        for t in 0..v {
            mean += &self.model.embed_text(t)?;
        }
        let norm = mean.dot(&mean).sqrt();
        if norm == 0.0 {
            return Err(Error::Planting("mean text embedding is zero".into()));
        }
        let u = mean / norm;
        let outer = Array2::from_shape_fn((u.len(), u.len()), |(r, c)| u[r] * u[c]);
        let original = self.model.head(target)?.w_qk.clone();
        let tau = self.cfg.air.tau_text;
        let strengths: Vec<f64> = match self.cfg.scenario.bias_strength {
            Some(s) => vec![s],
            None => (0..=MAX_BIAS_EXPONENT).map(|e| 2f64.powi(e)).collect(),
        };
        let prompt = self.prompt(0)?;
        let mut best = f64::NEG_INFINITY;
        for s in strengths {
            self.model.head_mut(target)?.w_qk = &original + &(&outer * s);
            let trace = generate_tokens(&self.model, &prompt, self.cfg.prompt.max_new_tokens, None)?;
            let min_frac = min_text_fraction(&trace, target)?;
            if min_frac > tau {
                self.plant = Plant::PlantedTextBias {
                    target,
                    strength: s,
                    baseline_min_text_fraction: min_frac,
                    tau_text: tau,
                };
                return Ok(());
            }
            best = best.max(min_frac);
        }
        self.model.head_mut(target)?.w_qk = original;
        Err(Error::Planting(format!(
            "text fraction of {target} never exceeded tau_text = {tau} (best minimum {best})"
        )))
    }

    /// Wires a layer-0 head to copy a trigger feature into a private output
    /// channel that only the designated token reads.
    ///
    /// Four coordinates are reserved: a query gate (set per text token), a
    /// trigger feature (set only on the trigger token), the output channel
    /// (first row written by the target head) and a reference channel nothing
    /// writes. Every other weight is cut from these coordinates. The
    /// designated token reads `output - reference`, which cancels the column
    /// mean that layer normalisation spreads over every coordinate.
    fn plant_hallucination_head(&mut self) -> Result<()> {
        let sc = self.cfg.scenario.clone();
        let target = HeadId::new(0, sc.target.head);
        self.model.check_head(target)?;
        let (d, v) = (self.model.d(), self.model.vocab());
        if v < 3 {
            return Err(Error::Config("hallucination scenario needs a vocabulary of at least 3".into()));
        }
        let hall = sc.hallucination_token.unwrap_or(v - 1);
        let trig = sc.trigger_token.unwrap_or(v - 2);
        if hall == trig {
            return Err(Error::Config("hallucination and trigger tokens must differ".into()));
        }
        let output = self.model.head_slice(target.head).start;
        let mut free = (0..d).rev().filter(|&c| c != output);
        let (gate, trigger, reference) = match (free.next(), free.next(), free.next()) {
            (Some(g), Some(t), Some(r)) => (g, t, r),
            _ => return Err(Error::Config("hallucination scenario needs d >= 4".into())),
        };
        let res = Reserved {
            gate,
            trigger,
            output,
            reference,
        };
        let reserved = res.all();
        let dh = self.model.config.head_dim();
        let m = &mut self.model;

        m.modality_embedding.columns_mut().into_iter().enumerate().for_each(|(c, mut col)| {
            if reserved.contains(&c) {
                col.fill(0.0);
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.model.seed, stream::PLANT, 0));
        for t in 0..v {
            let mut row = m.embedding_table.row_mut(t);
            for &c in &reserved {
                row[c] = 0.0;
            }
            row[gate] = if t == hall || t == trig { 0.0 } else { rng.random::<f64>() };
        }
        m.embedding_table[[trig, trigger]] = TRIGGER_AMPLITUDE;

        for (l, layer) in m.layers.iter_mut().enumerate() {
            for (h, hw) in layer.heads.iter_mut().enumerate() {
                if l == target.layer && h == target.head {
                    hw.w_qk.fill(0.0);
                    hw.w_qk[[gate, trigger]] = sc.gate_gain * (d as f64).sqrt() / TRIGGER_AMPLITUDE;
                    hw.w_v.fill(0.0);
                    hw.w_v[[0, trigger]] = 1.0;
                    continue;
                }
                for &c in &reserved {
                    hw.w_qk.row_mut(c).fill(0.0);
                    hw.w_qk.column_mut(c).fill(0.0);
                    hw.w_v.column_mut(c).fill(0.0);
                }
                for r in 0..dh {
                    if reserved.contains(&(h * dh + r)) {
                        hw.w_v.row_mut(r).fill(0.0);
                    }
                }
            }
            for &c in &reserved {
                layer.w_f1.column_mut(c).fill(0.0);
                layer.w_f2.row_mut(c).fill(0.0);
            }
        }
        for &c in &reserved {
            m.readout.row_mut(c).fill(0.0);
        }
        m.readout.column_mut(hall).fill(0.0);
        m.readout.column_mut(trig).fill(0.0);

        self.reserved = Some(res);
        self.plant = Plant::PlantedHallucinationHead {
            target,
            hallucination_token: hall,
            trigger_token: trig,
            alpha: 0.0,
            baseline_emissions: 0,
            baseline_steps: 0,
        };

        // Calibrate the readout gain on a probe: the trigger in context and a
        // fully open gate at the query.
        let mut probe = self.prompt(0)?;
        let opener = (0..v)
            .filter(|&t| t != hall && t != trig)
            .max_by(|&a, &b| self.model.embedding_table[[a, gate]].total_cmp(&self.model.embedding_table[[b, gate]]))
            .expect("vocabulary has ordinary tokens");
        probe.push(self.model.embed_text(opener)?.view(), Modality::Text, Some(opener))?;
        let out = forward(&self.model, &probe, &mut ForwardControl::new())?;
        let last = probe.len() - 1;
        let peak = out.hidden[[output, last]] - out.hidden[[reference, last]];
        if !(peak > 0.0) {
            return Err(Error::Planting(format!("planted output channel is not positive on the probe ({peak})")));
        }
        // Start from the configured boost; if prompt 0 emits the token too
        // rarely or too often, bisect the gain geometrically. Rare emissions
        // leave attribution with too few labeled steps.
        let mut alpha = sc.boost / peak;
        let (mut lo, mut hi): (Option<f64>, Option<f64>) = (None, None);
        let (mut emitted, mut steps) = (0, 0);
        let mut fallback = None;
        for _ in 0..MAX_ALPHA_TRIES {
            self.model.readout[[output, hall]] = alpha;
            self.model.readout[[reference, hall]] = -alpha;
            let trace = generate_tokens(&self.model, &self.prompt(0)?, self.cfg.prompt.max_new_tokens, None)?;
            emitted = self.labeled_steps(&trace, 0).len();
            steps = trace.steps.len();
            let rate = emitted as f64 / steps as f64;
            if emitted > 0 && emitted < steps && fallback.is_none() {
                fallback = Some((alpha, emitted));
            }
            if rate < EMISSION_RATE.0 {
                lo = Some(alpha);
                alpha = hi.map_or(alpha * 2.0, |h| (alpha * h).sqrt());
            } else if rate > EMISSION_RATE.1 {
                hi = Some(alpha);
                alpha = lo.map_or(alpha / 2.0, |l| (alpha * l).sqrt());
            } else {
                fallback = None;
                break;
            }
        }
        if let Some((a, e)) = fallback {
            log::warn!("planted emission rate outside the target band; using {e} of {steps} steps");
            alpha = a;
            emitted = e;
            self.model.readout[[output, hall]] = alpha;
            self.model.readout[[reference, hall]] = -alpha;
        }
        if emitted == 0 || emitted == steps {
            return Err(Error::Planting(format!(
                "baseline decode emitted the designated token at {emitted} of {steps} steps; need some but not all"
            )));
        }
        self.plant = Plant::PlantedHallucinationHead {
            target,
            hallucination_token: hall,
            trigger_token: trig,
            alpha,
            baseline_emissions: emitted,
            baseline_steps: steps,
        };
        Ok(())
    }
}

/// Smallest text fraction of `head` over the steps of `trace`.
pub fn min_text_fraction(trace: &DecodeTrace, head: HeadId) -> Result<f64> {
    let mods = trace.final_sequence.modalities();
    trace
        .steps
        .iter()
        .map(|s| {
            let a = s
                .attention(head)
                .ok_or_else(|| Error::InvalidArgument(format!("trace has no matrix for {head}")))?;
            text_attention_fraction(a, &mods[..a.len()])
        })
        .try_fold(f64::INFINITY, |acc, f| f.map(|f| acc.min(f)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::ModelConfig;

    fn small(kind: ScenarioKind) -> RunConfig {
        let mut c = RunConfig {
            model: ModelConfig {
                d: 16,
                layers: 2,
                heads: 2,
                vocab: 24,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        c.prompt.max_new_tokens = 12;
        c.scenario.kind = kind;
        c
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(1, stream::PROMPT, 0);
        assert_ne!(a, derive_seed(1, stream::PROMPT, 1));
        assert_ne!(a, derive_seed(1, stream::TAU, 0));
        assert_ne!(a, derive_seed(2, stream::PROMPT, 0));
        assert_eq!(a, derive_seed(1, stream::PROMPT, 0));
    }

    #[test]
    fn prompts_have_requested_layout_and_are_deterministic() {
        let sc = Scenario::build(&small(ScenarioKind::Random)).unwrap();
        let p = sc.prompt(3).unwrap();
        assert_eq!(p.len(), 24);
        assert_eq!(p.indices_of(Modality::Visual), (0..16).collect::<Vec<_>>());
        assert!(p.token_ids()[16..].iter().all(|t| t.is_some()));
        assert_eq!(p, sc.prompt(3).unwrap());
        assert_ne!(p, sc.prompt(4).unwrap());
        assert_ne!(p, sc.tau_prompt(3).unwrap());
    }

    #[test]
    fn text_bias_plant_holds_in_baseline() {
        let cfg = small(ScenarioKind::PlantedTextBias);
        let sc = Scenario::build(&cfg).unwrap();
        let Plant::PlantedTextBias { strength, baseline_min_text_fraction, .. } = sc.plant else {
            panic!("wrong plant")
        };
        assert!(strength >= 1.0);
        let trace = generate_tokens(&sc.model, &sc.prompt(0).unwrap(), 12, None).unwrap();
        let m = min_text_fraction(&trace, cfg.scenario.target).unwrap();
        assert_eq!(m, baseline_min_text_fraction);
        assert!(m > 0.3);
    }

    #[test]
    fn hallucination_plant_emits_and_labels() {
        let sc = Scenario::build(&small(ScenarioKind::PlantedHallucinationHead)).unwrap();
        let hall = sc.hallucination_token().unwrap();
        assert_eq!(hall, 23);
        let trace = generate_tokens(&sc.model, &sc.prompt(0).unwrap(), 12, None).unwrap();
        let labels = sc.token_labels(&trace, 0).unwrap();
        assert!(!labels.hallucinated.is_empty() && !labels.non_hallucinated.is_empty());
        for &s in &labels.hallucinated {
            assert_eq!(trace.steps[s].token_id, hall);
        }
        // odd prompts carry no trigger
        let odd = sc.prompt(1).unwrap();
        assert!(!odd.token_ids().contains(&Some(22)));
        assert!(sc.prompt(0).unwrap().token_ids().contains(&Some(22)));
    }

    #[test]
    fn random_labels_follow_fraction() {
        let sc = Scenario::build(&small(ScenarioKind::Random)).unwrap();
        let trace = generate_tokens(&sc.model, &sc.prompt(0).unwrap(), 12, None).unwrap();
        let a = sc.labeled_steps(&trace, 0);
        assert_eq!(a, sc.labeled_steps(&trace, 0));
        assert!(a.iter().all(|&s| s < 12));
    }

    #[test]
    fn impossible_bias_strength_is_rejected() {
        let mut cfg = small(ScenarioKind::PlantedTextBias);
        cfg.scenario.bias_strength = Some(0.0);
        cfg.air.tau_text = 0.999;
        assert!(matches!(Scenario::build(&cfg), Err(Error::Planting(_))));
    }
}
