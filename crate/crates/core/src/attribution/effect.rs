// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::HeadId;
use crate::attribution::DeltaTable;
use crate::error::{Error, Result};
use crate::numfmt::num;

/// Generated-step indices of one trace split into hallucinated and
/// non-hallucinated tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLabels {
    pub hallucinated: Vec<usize>,
    pub non_hallucinated: Vec<usize>,
}

impl TokenLabels {
    pub fn new(hallucinated: Vec<usize>, non_hallucinated: Vec<usize>) -> Result<Self> {
        if let Some(t) = hallucinated.iter().find(|t| non_hallucinated.contains(t)) {
            return Err(Error::Labels(format!("step {t} is in both label sets")));
        }
        Ok(Self {
            hallucinated,
            non_hallucinated,
        })
    }

    fn check_range(&self, steps: usize) -> Result<()> {
        match self
            .hallucinated
            .iter()
            .chain(&self.non_hallucinated)
            .find(|&&t| t >= steps)
        {
            Some(t) => Err(Error::Labels(format!("step {t} outside trace of {steps} steps"))),
            None => Ok(()),
        }
    }
}

/// Sensitivity and effect size of one head.
///
/// `degenerate` marks a nonzero sensitivity with zero spread; the effect
/// size is then an infinite sentinel carrying the sign of the sensitivity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEffect {
    pub head: HeadId,
    pub sensitivity: f64,
    #[serde(with = "sentinel")]
    pub effect_size: f64,
    pub degenerate: bool,
    pub var_hall: f64,
    pub var_non: f64,
    pub mean_hall: f64,
    pub mean_non: f64,
    pub n_hall: usize,
    pub n_non: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Effect of `head` from pooled hallucinated and non-hallucinated deltas.
pub fn effect_from_groups(head: HeadId, hall: &[f64], non: &[f64]) -> Result<HeadEffect> {
    if hall.is_empty() || non.is_empty() {
        return Err(Error::Labels(
            "both hallucinated and non-hallucinated sets must be non-empty".into(),
        ));
    }
    let (mean_hall, var_hall) = mean_var(hall);
    let (mean_non, var_non) = mean_var(non);
    let sensitivity = mean_hall - mean_non;
    let spread = (var_hall + var_non).sqrt();
    let (effect_size, degenerate) = if spread > 0.0 {
        (sensitivity / spread, false)
    } else if sensitivity == 0.0 {
        (0.0, false)
    } else {
        (f64::INFINITY.copysign(sensitivity), true)
    };
    Ok(HeadEffect {
        head,
        sensitivity,
        effect_size,
        degenerate,
        var_hall,
        var_non,
        mean_hall,
        mean_non,
        n_hall: hall.len(),
        n_non: non.len(),
    })
}

/// Effect of one head from the per-step deltas of a single trace.
pub fn sensitivity_and_effect(head: HeadId, deltas: &[f64], labels: &TokenLabels) -> Result<HeadEffect> {
    labels.check_range(deltas.len())?;
    let pick = |idx: &[usize]| idx.iter().map(|&t| deltas[t]).collect::<Vec<_>>();
    effect_from_groups(head, &pick(&labels.hallucinated), &pick(&labels.non_hallucinated))
}

/// Effects of every head in the table, pooling labeled steps across traces.
pub fn effects_from_table(table: &DeltaTable, labels: &[TokenLabels]) -> Result<Vec<HeadEffect>> {
    table
        .heads
        .iter()
        .zip(&table.deltas)
        .map(|(&head, per_trace)| {
            if per_trace.len() != labels.len() {
                return Err(Error::shape("label sets", per_trace.len(), labels.len()));
            }
            let mut hall = Vec::new();
            let mut non = Vec::new();
            for (d, l) in per_trace.iter().zip(labels) {
                l.check_range(d.len())?;
                hall.extend(l.hallucinated.iter().map(|&t| d[t]));
                non.extend(l.non_hallucinated.iter().map(|&t| d[t]));
            }
            effect_from_groups(head, &hall, &non)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsensitiveSelector {
    /// Smallest `|E_h|` among the heads not selected as sensitive.
    #[default]
    SmallestAbs,
    /// Lowest `E_h` among the heads not selected as sensitive.
    LowestEffect,
}

/// Means over all non-degenerate heads, the reference for "average" heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AverageSummary {
    pub heads: usize,
    pub mean_sensitivity: f64,
    pub mean_effect_size: f64,
    pub mean_delta_hall: f64,
    pub mean_delta_non: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    /// All rankable heads by effect size, descending.
    pub order: Vec<HeadId>,
    pub sensitive: Vec<HeadId>,
    pub insensitive: Vec<HeadId>,
    pub middle: Vec<HeadId>,
    /// Degenerate heads, left out of every set above.
    pub excluded: Vec<HeadId>,
    pub average: AverageSummary,
}

fn by_effect_desc(a: &HeadEffect, b: &HeadEffect) -> Ordering {
    b.effect_size
        .partial_cmp(&a.effect_size)
        .unwrap_or(Ordering::Equal)
        .then(a.head.cmp(&b.head))
}

/// Top `k` heads by effect size are sensitive; `k` of the remaining heads
/// chosen by `selector` are insensitive. Ties go to the lower `(layer, head)`.
pub fn rank_heads(effects: &[HeadEffect], k: usize, selector: InsensitiveSelector) -> Result<HeadRanking> {
    let (mut ranked, excluded): (Vec<&HeadEffect>, Vec<&HeadEffect>) =
        effects.iter().partition(|e| !e.degenerate);
    if k == 0 || k > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={} (rankable heads)",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| by_effect_desc(a, b));
    let sensitive: Vec<HeadId> = ranked[..k].iter().map(|e| e.head).collect();
    let mut rest: Vec<&HeadEffect> = ranked[k..].to_vec();
    match selector {
        InsensitiveSelector::SmallestAbs => rest.sort_by(|a, b| {
            a.effect_size
                .abs()
                .partial_cmp(&b.effect_size.abs())
                .unwrap_or(Ordering::Equal)
                .then(a.head.cmp(&b.head))
        }),
        InsensitiveSelector::LowestEffect => rest.sort_by(|a, b| {
            a.effect_size
                .partial_cmp(&b.effect_size)
                .unwrap_or(Ordering::Equal)
                .then(a.head.cmp(&b.head))
        }),
    }
    let n_ins = k.min(rest.len());
    let insensitive: Vec<HeadId> = rest[..n_ins].iter().map(|e| e.head).collect();
    let mut middle: Vec<HeadId> = rest[n_ins..].iter().map(|e| e.head).collect();
    middle.sort();
    let n = ranked.len() as f64;
    let average = AverageSummary {
        heads: ranked.len(),
        mean_sensitivity: ranked.iter().map(|e| e.sensitivity).sum::<f64>() / n,
        mean_effect_size: ranked.iter().map(|e| e.effect_size).sum::<f64>() / n,
        mean_delta_hall: ranked.iter().map(|e| e.mean_hall).sum::<f64>() / n,
        mean_delta_non: ranked.iter().map(|e| e.mean_non).sum::<f64>() / n,
    };
    Ok(HeadRanking {
        order: ranked.iter().map(|e| e.head).collect(),
        sensitive,
        insensitive,
        middle,
        excluded: excluded.iter().map(|e| e.head).collect(),
        average,
    })
}

/// Null distribution of `max_h |E_h|` under random relabeling.
///
/// Each shuffle permutes the labeled steps of every trace, keeping the
/// per-trace set sizes, and recomputes all effects from the cached deltas.
pub fn permutation_max_abs_effect(
    table: &DeltaTable,
    labels: &[TokenLabels],
    shuffles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(shuffles);
    for _ in 0..shuffles {
        let shuffled: Vec<TokenLabels> = labels
            .iter()
            .map(|l| {
                let mut pool: Vec<usize> = l.hallucinated.iter().chain(&l.non_hallucinated).copied().collect();
                pool.shuffle(&mut rng);
                let (h, n) = pool.split_at(l.hallucinated.len());
                TokenLabels {
                    hallucinated: h.to_vec(),
                    non_hallucinated: n.to_vec(),
                }
            })
            .collect();
        let effects = effects_from_table(table, &shuffled)?;
        out.push(
            effects
                .iter()
                .filter(|e| !e.degenerate)
                .map(|e| e.effect_size.abs())
                .fold(0.0, f64::max),
        );
    }
    Ok(out)
}

/// Nearest-rank quantile: the smallest value with at least `q` of the
/// sample at or below it.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument("quantile needs values and q in [0, 1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let rank = ((q * v.len() as f64).ceil() as usize).max(1);
    Ok(v[rank - 1])
}

pub fn effects_to_csv(effects: &[HeadEffect]) -> String {
    let mut out = String::from(
        "layer,head,sensitivity,effect_size,degenerate,var_hall,var_non,mean_hall,mean_non,n_hall,n_non\n",
    );
    for e in effects {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            e.head.layer,
            e.head.head,
            num(e.sensitivity),
            num(e.effect_size),
            e.degenerate,
            num(e.var_hall),
            num(e.var_non),
            num(e.mean_hall),
            num(e.mean_non),
            e.n_hall,
            e.n_non
        ));
    }
    out
}

/// `layers × heads` grid of effect sizes, one CSV row per layer. Missing
/// heads are left blank.
pub fn effect_grid_csv(effects: &[HeadEffect], layers: usize, heads: usize) -> String {
    let mut grid = vec![vec![None; heads]; layers];
    for e in effects {
        if e.head.layer < layers && e.head.head < heads {
            grid[e.head.layer][e.head.head] = Some(e.effect_size);
        }
    }
    let mut out = String::from("layer");
    for h in 0..heads {
        out.push_str(&format!(",h{h}"));
    }
    out.push('\n');
    for (l, row) in grid.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in row {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&num(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// Infinite effect sizes serialize as the strings `"inf"` / `"-inf"`.
mod sentinel {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad effect size {t:?}"))),
        }
    }
}
