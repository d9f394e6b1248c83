// SPDX-License-Identifier: MIT OR Apache-2.0

//! The four run pipelines. Each computes all of its artifacts in memory;
//! [`execute`] checks the output directory first and persists only after a
//! successful run.

use std::collections::BTreeSet;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::air::{decode_with_air, rectify_model, AirConfig, AirHook, TriggerRecord};
use crate::attn::{forward, generate_tokens, AttentionHook, DecodeTrace, ForwardControl, HeadId, IdentityHook, Modality, TinyModel};
use crate::attribution::{
    effect_grid_csv, effects_from_table, effects_to_csv, nearest_rank_quantile, permutation_max_abs_effect, rank_heads,
    DeltaTable, HeadEffect, HeadRanking, TokenLabels,
};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::heatmap::{render_svg, MatrixDump};
use crate::harness::output::{ensure_writable, matrix_csv, Artifacts};
use crate::harness::scenario::{derive_seed, stream, Plant, Scenario};
use crate::metrics::{
    estimate_contributions_with, layer_mean_attention, mai, modality_attention_mass, tai_all, tai_threshold,
    ImbalanceReport,
};
use crate::numfmt::num;
use crate::theory::family::{localized_spec, random_psd, random_symmetric, random_vector, random_walk_spec};
use crate::theory::mc::{compare_gaussian, compare_walk, mc_gaussian_moments, mc_linearized, mc_walk_moments, rho_check_from};
use crate::theory::{
    classify_regime_with, gaussian_quadratic_moments, lemma2_exact, lemma2_mu_v, numeric_peak, rho_sweep,
    walk_quadratic_moments, walk_quadratic_moments_exact, Estimate, RegimeReport, TheoryResult, WalkSpec,
};

/// Serialization of tabular artifacts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Checks that `dir` is writable, runs `compute`, then commits its
/// artifacts. Nothing is written when `compute` fails.
pub fn execute<T>(dir: &Path, compute: impl FnOnce() -> Result<(Artifacts, T)>) -> Result<T> {
    ensure_writable(dir)?;
    let (artifacts, summary) = compute()?;
    artifacts.commit(dir)?;
    Ok(summary)
}

/// Per-step TAI of a decode, from a fresh forward pass over the final
/// sequence: head-mean attention of `layer` against ablation contributions
/// toward the next token. `hook`, when given, runs on every pass.
pub fn trace_tai(
    model: &TinyModel,
    trace: &DecodeTrace,
    layer: usize,
    hook: Option<&mut dyn AttentionHook>,
) -> Result<Vec<Option<f64>>> {
    let seq = &trace.final_sequence;
    let mut identity = IdentityHook;
    let hook: &mut dyn AttentionHook = match hook {
        Some(h) => h,
        None => &mut identity,
    };
    hook.begin_step(trace.steps.len());
    let out = forward(model, seq, &mut ForwardControl::new().with_hook(&mut *hook))?;
    let a = layer_mean_attention(&out.attentions, layer)?;
    let profile = estimate_contributions_with(model, seq, seq.len(), Some(hook))?;
    let all = tai_all(&a, &profile)?;
    Ok(all[trace.prompt_len..].to_vec())
}

fn max_defined(tai: &[Option<f64>]) -> Option<f64> {
    tai.iter().flatten().copied().reduce(f64::max)
}

/// Threshold from the per-example maxima; examples with no defined TAI are
/// skipped.
fn threshold_from(maxima: &[Option<f64>]) -> Result<f64> {
    let vals: Vec<f64> = maxima.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::Precondition("no threshold example has a defined TAI".into()));
    }
    tai_threshold(&vals)
}

fn head_file(prefix: &str, h: HeadId, ext: &str) -> String {
    format!("{prefix}_L{}_H{}.{ext}", h.layer, h.head)
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct StepJson<'a> {
    step: usize,
    position: usize,
    token_id: usize,
    probability: f64,
    distribution: &'a [f64],
}

#[derive(Serialize)]
struct TraceJson<'a> {
    scenario: &'a Plant,
    prompt_len: usize,
    modalities: String,
    prompt_token_ids: &'a [Option<usize>],
    generated: Vec<usize>,
    steps: Vec<StepJson<'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub scenario: Plant,
    pub tai_layer: usize,
    pub tau_example_maxima: Vec<Option<f64>>,
    pub report: ImbalanceReport,
}

pub fn run_simulate(cfg: &RunConfig, format: Format) -> Result<(Artifacts, SimulateSummary)> {
    let sc = Scenario::build(cfg)?;
    simulate_with(&sc, format)
}

pub fn simulate_with(sc: &Scenario, format: Format) -> Result<(Artifacts, SimulateSummary)> {
    let cfg = sc.config();
    for &h in &cfg.output.heatmap_heads {
        sc.model.check_head(h)?;
    }
    let layer = cfg.tai_layer();
    let max_new = cfg.prompt.max_new_tokens;
    let prompt = sc.prompt(0)?;
    let trace = generate_tokens(&sc.model, &prompt, max_new, None)?;
    info!("simulate: decoded {} steps", trace.steps.len());
    let tai = trace_tai(&sc.model, &trace, layer, None)?;

    let maxima = (0..cfg.analysis.tau_examples as u64)
        .map(|k| {
            let t = generate_tokens(&sc.model, &sc.tau_prompt(k)?, max_new, None)?;
            Ok(max_defined(&trace_tai(&sc.model, &t, layer, None)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let tau = threshold_from(&maxima)?;
    let labeled = sc.labeled_steps(&trace, 0);
    let report = ImbalanceReport::build(tai, tau, labeled, cfg.analysis.window);

    let mut art = Artifacts::new();
    let seq = &trace.final_sequence;
    let trace_json = TraceJson {
        scenario: &sc.plant,
        prompt_len: trace.prompt_len,
        modalities: crate::attn::modality_string(seq.modalities()),
        prompt_token_ids: &seq.token_ids()[..trace.prompt_len],
        generated: trace.generated_tokens(),
        steps: trace
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| StepJson {
                step: k,
                position: trace.position_of_step(k),
                token_id: s.token_id,
                probability: s.distribution[s.token_id],
                distribution: &s.distribution,
            })
            .collect(),
    };
    art.add_json("trace.json", &trace_json)?;
    match format {
        Format::Csv => art.add("tai.csv", report.to_csv()),
        Format::Json => art.add_json("tai.json", &report)?,
    }
    let summary = SimulateSummary {
        scenario: sc.plant.clone(),
        tai_layer: layer,
        tau_example_maxima: maxima,
        report,
    };
    art.add_json("report.json", &summary)?;

    let full = forward(&sc.model, seq, &mut ForwardControl::new())?;
    for &h in &cfg.output.heatmap_heads {
        let a = crate::metrics::find_head(&full.attentions, h)?;
        let csv = matrix_csv(a.weights(), Some(seq.modalities()));
        let svg = render_svg(&MatrixDump {
            matrix: a.weights().clone(),
            modalities: Some(seq.modalities().to_vec()),
        });
        art.add(head_file("attn", h, "csv"), csv);
        art.add(head_file("heatmap", h, "svg"), svg);
    }
    Ok((art, summary))
}

// --------------------------------------------------------------- attribute

/// Decodes attribution prompt `index` and labels it.
fn labeled_trace(sc: &Scenario, model: &TinyModel, index: u64) -> Result<(DecodeTrace, TokenLabels)> {
    let trace = generate_tokens(model, &sc.prompt(index)?, sc.config().prompt.max_new_tokens, None)?;
    let labels = sc.token_labels(&trace, index)?;
    Ok((trace, labels))
}

/// Contents of `selection.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub k: usize,
    pub sensitive: Vec<HeadId>,
    pub insensitive: Vec<HeadId>,
    pub middle: Vec<HeadId>,
    pub excluded: Vec<HeadId>,
    pub order: Vec<HeadId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub scenario: Plant,
    pub hallucinated_steps: usize,
    pub non_hallucinated_steps: usize,
    pub effects: Vec<HeadEffect>,
    pub ranking: HeadRanking,
    pub null_quantile: f64,
    /// Quantile of the permutation null of `max |E_h|`.
    pub null_threshold: f64,
    /// Heads whose `|E_h|` exceeds `null_threshold`.
    pub exceeding_null: Vec<HeadId>,
    /// 1-based rank of the planted head by effect size.
    pub planted_rank: Option<usize>,
}

pub fn run_attribute(cfg: &RunConfig, format: Format) -> Result<(Artifacts, AttributeSummary)> {
    check_k(cfg)?;
    let sc = Scenario::build(cfg)?;
    attribute_with(&sc, format)
}

fn check_k(cfg: &RunConfig) -> Result<()> {
    let total = cfg.model.layers * cfg.model.heads;
    if cfg.attribution.k == 0 || cfg.attribution.k > total {
        return Err(Error::Precondition(format!(
            "k = {} but the model has {total} heads",
            cfg.attribution.k
        )));
    }
    Ok(())
}

pub fn attribute_with(sc: &Scenario, format: Format) -> Result<(Artifacts, AttributeSummary)> {
    let cfg = sc.config();
    check_k(cfg)?;
    let ac = &cfg.attribution;
    let (traces, labels): (Vec<_>, Vec<_>) = (0..ac.prompts as u64)
        .map(|i| labeled_trace(sc, &sc.model, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let heads = sc.model.head_ids();
    let table = DeltaTable::compute(&sc.model, &traces, &heads)?;
    let effects = effects_from_table(&table, &labels)?;
    let ranking = rank_heads(&effects, ac.k, ac.selector)?;
    info!("attribute: ranked {} heads", ranking.order.len());
    let null = permutation_max_abs_effect(&table, &labels, ac.shuffles, derive_seed(ac.seed, stream::SHUFFLE, 0))?;
    let null_threshold = if null.is_empty() {
        f64::INFINITY
    } else {
        nearest_rank_quantile(&null, ac.null_quantile)?
    };
    let exceeding_null = effects
        .iter()
        .filter(|e| !e.degenerate && e.effect_size.abs() > null_threshold)
        .map(|e| e.head)
        .collect();
    let planted_rank = sc
        .target()
        .and_then(|t| ranking.order.iter().position(|&h| h == t))
        .map(|p| p + 1);
    let summary = AttributeSummary {
        scenario: sc.plant.clone(),
        hallucinated_steps: labels.iter().map(|l| l.hallucinated.len()).sum(),
        non_hallucinated_steps: labels.iter().map(|l| l.non_hallucinated.len()).sum(),
        effects,
        ranking,
        null_quantile: ac.null_quantile,
        null_threshold,
        exceeding_null,
        planted_rank,
    };

    let mut art = Artifacts::new();
    match format {
        Format::Csv => art.add("effects.csv", effects_to_csv(&summary.effects)),
        Format::Json => art.add_json("effects.json", &EffectsJson { effects: &summary.effects })?,
    }
    art.add(
        "effect_grid.csv",
        effect_grid_csv(&summary.effects, cfg.model.layers, cfg.model.heads),
    );
    let r = &summary.ranking;
    art.add_json(
        "selection.json",
        &Selection {
            k: ac.k,
            sensitive: r.sensitive.clone(),
            insensitive: r.insensitive.clone(),
            middle: r.middle.clone(),
            excluded: r.excluded.clone(),
            order: r.order.clone(),
        },
    )?;
    art.add_json("attribution_report.json", &summary)?;
    Ok((art, summary))
}

#[derive(Serialize)]
struct EffectsJson<'a> {
    effects: &'a [HeadEffect],
}

/// Reads a sensitive-head set from a `selection.json`-style object (its
/// `sensitive` field) or a bare JSON array of `{layer, head}` records.
pub fn read_head_set(text: &str) -> Result<BTreeSet<HeadId>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum HeadFile {
        Selection { sensitive: Vec<HeadId> },
        List(Vec<HeadId>),
    }
    let parsed: HeadFile = serde_json::from_str(text)
        .map_err(|e| Error::Precondition(format!("sensitive-head file is not a head list or selection: {e}")))?;
    Ok(match parsed {
        HeadFile::Selection { sensitive } => sensitive.into_iter().collect(),
        HeadFile::List(v) => v.into_iter().collect(),
    })
}

/// Sensitive-head set for rectification: the explicit file, else the
/// config's `air.sensitive_heads` when non-empty, else `selection.json`
/// from a previous attribution run in `out_dir`.
pub fn resolve_sensitive_heads(cfg: &RunConfig, heads_file: Option<&Path>, out_dir: &Path) -> Result<BTreeSet<HeadId>> {
    if let Some(p) = heads_file {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Precondition(format!("cannot read sensitive-head file {}: {e}", p.display())))?;
        return read_head_set(&text);
    }
    if !cfg.air.sensitive_heads.is_empty() {
        return Ok(cfg.air.sensitive_heads.clone());
    }
    let sel = out_dir.join("selection.json");
    match std::fs::read_to_string(&sel) {
        Ok(text) => read_head_set(&text),
        Err(_) => Err(Error::Precondition(format!(
            "no sensitive-head set: pass --heads, set air.sensitive_heads, or run attribute first ({} missing)",
            sel.display()
        ))),
    }
}

// ----------------------------------------------------------------- rectify

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMai {
    pub head: HeadId,
    /// Mean `MAI(text, visual)` over every decoding step of every prompt.
    pub baseline: Option<f64>,
    pub air: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptComparison {
    pub prompt: usize,
    pub baseline_tokens: Vec<usize>,
    pub air_tokens: Vec<usize>,
    pub identical: bool,
    pub flagged_baseline: usize,
    pub flagged_air: usize,
    pub emissions_baseline: Option<usize>,
    pub emissions_air: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifySummary {
    pub scenario: Plant,
    pub sensitive_heads: Vec<HeadId>,
    pub air: AirConfig,
    pub head_mai: Vec<HeadMai>,
    /// Mean over sensitive heads of the per-head means.
    pub mean_mai_baseline: Option<f64>,
    pub mean_mai_air: Option<f64>,
    pub triggered_records: usize,
    /// Triggered records whose text fraction fell under reallocation.
    pub reallocation_reduced: usize,
    pub threshold: f64,
    pub flagged_baseline: usize,
    pub flagged_air: usize,
    pub hallucination_token: Option<usize>,
    pub emissions_baseline: Option<usize>,
    pub emissions_air: Option<usize>,
    pub identical_prompts: usize,
    pub prompts: Vec<PromptComparison>,
}

fn mai_series(trace: &DecodeTrace, head: HeadId) -> Result<Vec<f64>> {
    let mods = trace.final_sequence.modalities();
    let mut out = Vec::new();
    for s in &trace.steps {
        let a = s
            .attention(head)
            .ok_or_else(|| Error::InvalidArgument(format!("trace has no matrix for {head}")))?;
        let mass = modality_attention_mass(a, &mods[..a.len()])?;
        if let Ok(v) = mai(&mass, Modality::Text, Modality::Visual) {
            out.push(v);
        }
    }
    Ok(out)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_rectify(cfg: &RunConfig, sensitive: BTreeSet<HeadId>) -> Result<(Artifacts, RectifySummary)> {
    let sc = Scenario::build(cfg)?;
    rectify_with(&sc, sensitive)
}

pub fn rectify_with(sc: &Scenario, sensitive: BTreeSet<HeadId>) -> Result<(Artifacts, RectifySummary)> {
    let cfg = sc.config();
    let air = AirConfig {
        sensitive_heads: sensitive,
        ..cfg.air.clone()
    };
    air.validate(Some(&sc.model))?;
    let (rectified, _) = rectify_model(&sc.model, &air)?;
    let layer = cfg.tai_layer();
    let max_new = cfg.prompt.max_new_tokens;
    let hall = sc.hallucination_token();

    let mut base_traces = Vec::new();
    let mut air_traces = Vec::new();
    let mut triggers: Vec<(usize, TriggerRecord)> = Vec::new();
    for i in 0..cfg.rectify.prompts {
        let prompt = sc.prompt(i as u64)?;
        base_traces.push(generate_tokens(&sc.model, &prompt, max_new, None)?);
        let at = decode_with_air(&rectified, &prompt, &air, max_new)?;
        triggers.extend(at.triggers.iter().map(|r| (i, *r)));
        air_traces.push(at.trace);
    }
    info!("rectify: decoded {} prompt pairs", base_traces.len());

    let base_tai = base_traces
        .iter()
        .map(|t| trace_tai(&sc.model, t, layer, None))
        .collect::<Result<Vec<_>>>()?;
    let air_tai = air_traces
        .iter()
        .map(|t| {
            let mut hook = AirHook::new(air.clone());
            trace_tai(&rectified, t, layer, Some(&mut hook))
        })
        .collect::<Result<Vec<_>>>()?;
    let maxima: Vec<Option<f64>> = base_tai.iter().map(|t| max_defined(t)).collect();
    let threshold = threshold_from(&maxima)?;
    let count = |t: &[Option<f64>]| t.iter().flatten().filter(|&&v| v > threshold).count();

    let mut head_mai = Vec::new();
    for &h in &air.sensitive_heads {
        let mut b = Vec::new();
        let mut a = Vec::new();
        for (bt, at) in base_traces.iter().zip(&air_traces) {
            b.extend(mai_series(bt, h)?);
            a.extend(mai_series(at, h)?);
        }
        head_mai.push(HeadMai {
            head: h,
            baseline: mean(&b),
            air: mean(&a),
        });
    }
    let mean_of = |f: fn(&HeadMai) -> Option<f64>| {
        let v: Option<Vec<f64>> = head_mai.iter().map(f).collect();
        v.and_then(|v| mean(&v))
    };

    let emissions = |t: &DecodeTrace| hall.map(|h| t.steps.iter().filter(|s| s.token_id == h).count());
    let prompts: Vec<PromptComparison> = base_traces
        .iter()
        .zip(&air_traces)
        .enumerate()
        .map(|(i, (b, a))| PromptComparison {
            prompt: i,
            baseline_tokens: b.generated_tokens(),
            air_tokens: a.generated_tokens(),
            identical: b == a,
            flagged_baseline: count(&base_tai[i]),
            flagged_air: count(&air_tai[i]),
            emissions_baseline: emissions(b),
            emissions_air: emissions(a),
        })
        .collect();
    let triggered: Vec<&TriggerRecord> = triggers.iter().map(|(_, r)| r).filter(|r| r.applied).collect();
    let sum_opt = |f: fn(&PromptComparison) -> Option<usize>| prompts.iter().map(f).sum::<Option<usize>>();
    let summary = RectifySummary {
        scenario: sc.plant.clone(),
        sensitive_heads: air.sensitive_heads.iter().copied().collect(),
        air: air.clone(),
        mean_mai_baseline: mean_of(|h| h.baseline),
        mean_mai_air: mean_of(|h| h.air),
        head_mai,
        triggered_records: triggered.len(),
        reallocation_reduced: triggered
            .iter()
            .filter(|r| r.post_reallocation_fraction.is_some_and(|p| p < r.pre_fraction))
            .count(),
        threshold,
        flagged_baseline: prompts.iter().map(|p| p.flagged_baseline).sum(),
        flagged_air: prompts.iter().map(|p| p.flagged_air).sum(),
        hallucination_token: hall,
        emissions_baseline: sum_opt(|p| p.emissions_baseline),
        emissions_air: sum_opt(|p| p.emissions_air),
        identical_prompts: prompts.iter().filter(|p| p.identical).count(),
        prompts,
    };

    let mut art = Artifacts::new();
    let mut csv = String::from("prompt,step,layer,head,pre_fraction,post_reallocation_fraction,final_fraction,applied\n");
    for (i, r) in &triggers {
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            r.step,
            r.layer,
            r.head,
            num(r.pre_fraction),
            crate::numfmt::opt_num(r.post_reallocation_fraction),
            num(r.final_fraction),
            r.applied
        ));
    }
    art.add("triggers.csv", csv);
    art.add_json("rectify_report.json", &summary)?;
    Ok((art, summary))
}

// ------------------------------------------------------------------ theory

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheck {
    /// Check family: `lemma1`, `walk-formula`, `walk-exact`,
    /// `lemma2-formula`, `lemma2-exact`, `rho-exact`, `rho-index`,
    /// `rho-theta`, `peak`.
    pub group: String,
    pub instance: usize,
    #[serde(flatten)]
    pub result: TheoryResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub file: String,
    pub regime: RegimeReport,
    pub numeric_peak: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub checks: Vec<TheoryCheck>,
    /// Agreement per group, in first-appearance order.
    pub groups: Vec<(String, bool)>,
    pub all_agree: bool,
    pub sweeps: Vec<SweepSummary>,
}

impl TheorySummary {
    pub fn group_agrees(&self, group: &str) -> Option<bool> {
        self.groups.iter().find(|(g, _)| g == group).map(|(_, a)| *a)
    }
}

/// Specs swept over `θ`: a zero-trace (uniform) spec, a localized spec with
/// `tr W = 3√d`, and `W = I`.
pub fn sweep_specs(cfg: &RunConfig) -> Result<Vec<(String, WalkSpec)>> {
    let th = &cfg.theory;
    let (d, t) = (th.lemma2_d, th.lemma2_t);
    let seed = derive_seed(th.seed, stream::THEORY, 1_000);
    Ok(vec![
        ("uniform".to_string(), localized_spec(d, t, 0.0, 1.0, seed)?.with_convention(th.convention)),
        ("localized".to_string(), localized_spec(d, t, 3.0, 0.3, seed)?.with_convention(th.convention)),
        (
            "identity".to_string(),
            WalkSpec::identity(d, t, ndarray::Array2::eye(d))?.with_convention(th.convention),
        ),
    ])
}

pub fn run_theory(cfg: &RunConfig) -> Result<(Artifacts, TheorySummary)> {
    cfg.validate()?;
    let th = &cfg.theory;
    let z = th.z;
    let mut checks = Vec::new();
    let mut push = |group: &str, instance: usize, result: TheoryResult| {
        checks.push(TheoryCheck {
            group: group.to_string(),
            instance,
            result,
        })
    };

    for inst in 0..th.lemma1_instances {
        let d = [2, 4, 8][inst % 3];
        let seed = derive_seed(th.seed, stream::THEORY, inst as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_symmetric(d, &mut rng);
        let sigma = random_psd(d, &mut rng);
        let mu = random_vector(d, &mut rng);
        let a = random_vector(d, &mut rng);
        let analytic = gaussian_quadratic_moments(&w, &sigma, &mu, &a)?;
        let mc = mc_gaussian_moments(&w, &sigma, &mu, &a, th.lemma1_samples, seed)?;
        for r in compare_gaussian(&analytic, &mc, z) {
            push("lemma1", inst, r);
        }
    }

    for inst in 0..th.walk_instances {
        let d = [2, 3, 4][inst % 3];
        let seed = derive_seed(th.seed, stream::THEORY, 100 + inst as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_symmetric(d, &mut rng);
        let sigma = random_psd(d, &mut rng);
        let j = rng.random_range(1..=th.walk_max_index);
        let i = rng.random_range(1..=j);
        let mc = mc_walk_moments(&w, &sigma, i, j, th.convention, th.walk_samples, seed)?;
        for r in compare_walk(&walk_quadratic_moments(&w, &sigma, i, j)?, &mc, z) {
            push("walk-formula", inst, TheoryResult { label: format!("{} (i={i}, j={j})", r.label), ..r });
        }
        for r in compare_walk(&walk_quadratic_moments_exact(&w, &sigma, i, j)?, &mc, z) {
            push("walk-exact", inst, TheoryResult { label: format!("{} (i={i}, j={j})", r.label), ..r });
        }
    }

    let (d, t) = (th.lemma2_d, th.lemma2_t);
    let tol = crate::theory::mc::asymptotic_allowance(t);
    for inst in 0..th.lemma2_specs {
        let seed = derive_seed(th.seed, stream::THEORY, 200 + inst as u64);
        let (spec, i) = if inst == 0 {
            (WalkSpec::identity(d, t, ndarray::Array2::eye(d))?, 3 * t / 4)
        } else {
            let i = [t / 4, t / 2, 3 * t / 4, t][inst % 4].max(1);
            (random_walk_spec(d, t, seed)?, i)
        };
        let spec = spec.with_convention(th.convention);
        let mc = mc_linearized(&spec, i, th.lemma2_samples, seed)?;
        let formula = lemma2_mu_v(&spec, i)?;
        let exact = lemma2_exact(&spec, i)?;
        push("lemma2-formula", inst, TheoryResult::compare(format!("mu (i={i})"), formula.mean, mc.mean, z, tol));
        push("lemma2-formula", inst, TheoryResult::compare(format!("v (i={i})"), formula.variance, mc.variance, z, tol));
        push("lemma2-exact", inst, TheoryResult::compare(format!("mu (i={i})"), exact.mean, mc.mean, z, tol));
        push("lemma2-exact", inst, TheoryResult::compare(format!("v (i={i})"), exact.variance, mc.variance, z, tol));
        let rho = rho_check_from(&spec, i, &mc)?;
        if let Ok(r) = crate::theory::rho_index(exact.mean, exact.variance) {
            let res = TheoryResult::compare(format!("rho_i exact moments (i={i})"), r, mc.in_unit, z, crate::theory::mc::RHO_ALLOWANCE);
            push("rho-exact", inst, res);
        }
        if let Some(r) = rho.vs_index {
            push("rho-index", inst, TheoryResult { label: format!("{} (i={i})", r.label), ..r });
        }
        if let Some(r) = rho.vs_theta {
            push("rho-theta", inst, TheoryResult { label: format!("{} (i={i})", r.label), ..r });
        }
    }

    let mut art = Artifacts::new();
    let mut sweeps = Vec::new();
    for (k, (name, spec)) in sweep_specs(cfg)?.into_iter().enumerate() {
        let sweep = rho_sweep(&spec, th.sweep_points)?;
        let regime = classify_regime_with(&spec, th.uniform_tol)?;
        let peak = numeric_peak(&sweep).map(|p| p.theta);
        if let (Some(star), Some(p), crate::theory::Regime::Localized) = (regime.theta_star, peak, regime.regime) {
            let grid = 1.0 / (th.sweep_points - 1) as f64;
            let est = Estimate {
                value: p,
                std_error: 0.0,
                samples: th.sweep_points as u64,
            };
            push("peak", k, TheoryResult::compare(format!("{name} argmax rho"), star, est, z, grid.max(0.02)));
        }
        let mut csv = String::from("theta,rho\n");
        for pt in &sweep {
            csv.push_str(&format!("{},{}\n", num(pt.theta), num(pt.rho)));
        }
        let file = format!("rho_sweep_{name}.csv");
        art.add(file.clone(), csv);
        sweeps.push(SweepSummary {
            name,
            file,
            regime,
            numeric_peak: peak,
        });
    }

    let mut groups: Vec<(String, bool)> = Vec::new();
    for c in &checks {
        match groups.iter_mut().find(|(g, _)| *g == c.group) {
            Some(slot) => slot.1 &= c.result.agrees,
            None => groups.push((c.group.clone(), c.result.agrees)),
        }
    }
    let summary = TheorySummary {
        all_agree: groups.iter().all(|(_, a)| *a),
        checks,
        groups,
        sweeps,
    };
    let mut csv = String::from("group,instance,label,analytic,estimate,std_error,samples,z,abs_tol,agrees\n");
    for c in &summary.checks {
        let r = &c.result;
        csv.push_str(&format!(
            "{},{},\"{}\",{},{},{},{},{},{},{}\n",
            c.group,
            c.instance,
            r.label,
            num(r.analytic),
            num(r.estimate),
            num(r.std_error),
            r.samples,
            num(r.z),
            num(r.abs_tol),
            r.agrees
        ));
    }
    art.add("theory_checks.csv", csv);
    art.add_json("theory_report.json", &summary)?;
    Ok((art, summary))
}
