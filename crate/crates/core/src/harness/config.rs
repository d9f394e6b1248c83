// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::air::AirConfig;
use crate::attn::{HeadId, ModelConfig};
use crate::attribution::InsensitiveSelector;
use crate::error::{Error, Result};
use crate::theory::WalkConvention;

/// How prompts are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            visual_tokens: 16,
            text_tokens: 8,
            seed: 1,
            max_new_tokens: 24,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    #[default]
    Random,
    PlantedTextBias,
    PlantedHallucinationHead,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(Self::Random),
            "planted-text-bias" => Some(Self::PlantedTextBias),
            "planted-hallucination-head" => Some(Self::PlantedHallucinationHead),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::PlantedTextBias => "planted-text-bias",
            Self::PlantedHallucinationHead => "planted-hallucination-head",
        }
    }
}

/// Scenario selection and planting parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Head that receives the planted behaviour.
    pub target: HeadId,
    /// Rank-one `W_QK` boost for the text-bias plant; `None` sweeps powers
    /// of two until the baseline text fraction exceeds `tau_text` at every
    /// step.
    pub bias_strength: Option<f64>,
    /// Token boosted by the planted hallucination head; default `V - 1`.
    pub hallucination_token: Option<usize>,
    /// Token whose presence the planted head detects; default `V - 2`.
    pub trigger_token: Option<usize>,
    /// Logit boost of the hallucination token at full trigger attention.
    pub boost: f64,
    /// Query-key gain of the planted head.
    pub gate_gain: f64,
    /// Fraction of generated steps labeled hallucinated when labels are
    /// injected at random.
    pub label_fraction: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Random,
            target: HeadId::new(0, 0),
            bias_strength: None,
            hallucination_token: None,
            trigger_token: None,
            boost: 10.0,
            gate_gain: 6.0,
            label_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Seeded examples behind the TAI threshold.
    pub tau_examples: usize,
    pub window: usize,
    /// Layer whose head-mean attention feeds TAI; `None` is the last layer.
    pub tai_layer: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            tau_examples: 16,
            window: crate::metrics::DEFAULT_WINDOW,
            tai_layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub k: usize,
    pub prompts: usize,
    pub shuffles: usize,
    pub null_quantile: f64,
    pub seed: u64,
    pub selector: InsensitiveSelector,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            k: 20,
            prompts: 8,
            shuffles: 100,
            null_quantile: 0.99,
            seed: 1,
            selector: InsensitiveSelector::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifyConfig {
    /// Paired baseline / rectified decodes.
    pub prompts: usize,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self { prompts: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub seed: u64,
    pub z: f64,
    pub convention: WalkConvention,
    pub lemma1_instances: usize,
    pub lemma1_samples: usize,
    pub walk_instances: usize,
    pub walk_samples: usize,
    pub walk_max_index: usize,
    pub lemma2_specs: usize,
    pub lemma2_d: usize,
    pub lemma2_t: usize,
    pub lemma2_samples: usize,
    pub sweep_points: usize,
    pub uniform_tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            z: crate::theory::mc::DEFAULT_Z,
            convention: WalkConvention::default(),
            lemma1_instances: 6,
            lemma1_samples: 100_000,
            walk_instances: 4,
            walk_samples: 100_000,
            walk_max_index: 16,
            lemma2_specs: 2,
            lemma2_d: 64,
            lemma2_t: 256,
            lemma2_samples: 20_000,
            sweep_points: 101,
            uniform_tol: crate::theory::UNIFORM_TRACE_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub heatmap_heads: Vec<HeadId>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("airlens-out"),
            heatmap_heads: vec![HeadId::new(0, 0)],
        }
    }
}

/// Every knob of a run. Each section and field has a default, and unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub prompt: PromptConfig,
    pub scenario: ScenarioSpec,
    pub analysis: AnalysisConfig,
    pub attribution: AttributionConfig,
    pub air: AirConfig,
    pub rectify: RectifyConfig,
    pub theory: TheoryConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every seed (model, prompts, attribution shuffles, theory).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.prompt.seed = seed;
        self.attribution.seed = seed;
        self.theory.seed = seed;
        self
    }

    pub fn tai_layer(&self) -> usize {
        self.analysis.tai_layer.unwrap_or(self.model.layers.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.air.validate(None)?;
        if self.prompt.visual_tokens + self.prompt.text_tokens == 0 {
            return bad("prompt needs at least one token".into());
        }
        if self.prompt.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1".into());
        }
        if self.tai_layer() >= self.model.layers {
            return bad(format!("tai_layer {} outside {} layers", self.tai_layer(), self.model.layers));
        }
        if self.analysis.tau_examples == 0 || self.analysis.window == 0 {
            return bad("tau_examples and window must be >= 1".into());
        }
        if self.attribution.prompts == 0 || !(0.0..=1.0).contains(&self.attribution.null_quantile) {
            return bad("attribution needs prompts >= 1 and null_quantile in [0, 1]".into());
        }
        if self.rectify.prompts == 0 {
            return bad("rectify.prompts must be >= 1".into());
        }
        let sc = &self.scenario;
        if !(0.0..=1.0).contains(&sc.label_fraction) {
            return bad("scenario.label_fraction must lie in [0, 1]".into());
        }
        if sc.bias_strength.is_some_and(|s| !s.is_finite()) || !sc.boost.is_finite() || !sc.gate_gain.is_finite() {
            return bad("scenario strengths must be finite".into());
        }
        for t in [sc.hallucination_token, sc.trigger_token].into_iter().flatten() {
            if t >= self.model.vocab {
                return bad(format!("scenario token {t} outside vocabulary of {}", self.model.vocab));
            }
        }
        let th = &self.theory;
        if th.walk_max_index == 0 || th.lemma2_t < 2 || th.lemma2_d == 0 || th.sweep_points < 2 || th.z <= 0.0 {
            return bad("theory: walk_max_index >= 1, lemma2_t >= 2, lemma2_d >= 1, sweep_points >= 2, z > 0".into());
        }
        if th.lemma2_specs > 0 && th.lemma2_samples < crate::theory::mc::MIN_RHO_SAMPLES {
            return bad(format!("theory.lemma2_samples must be >= {}", crate::theory::mc::MIN_RHO_SAMPLES));
        }
        Ok(())
    }

    pub fn heads_all(&self) -> BTreeSet<HeadId> {
        (0..self.model.layers)
            .flat_map(|l| (0..self.model.heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }
}
