// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::attn::AttentionMatrix;
use crate::error::{Error, Result};
use crate::metrics::detect_defined;

/// Default look-ahead window for pairing labeled tokens with flagged ones.
pub const DEFAULT_WINDOW: usize = 15;

/// A labeled token that follows a flagged token within the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceHit {
    pub flagged: usize,
    pub labeled: usize,
    pub gap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub hits: Vec<CooccurrenceHit>,
    /// `hits / |labeled|`; `None` with no labels.
    pub rate: Option<f64>,
}

/// Pairs each labeled index with its nearest preceding flagged index and
/// keeps the pairs whose gap is in `1..=window`.
pub fn cooccurrence_stats(flagged: &[usize], labeled: &[usize], window: usize) -> CooccurrenceStats {
    let mut flagged = flagged.to_vec();
    flagged.sort_unstable();
    flagged.dedup();
    let mut labeled = labeled.to_vec();
    labeled.sort_unstable();
    labeled.dedup();
    let hits: Vec<CooccurrenceHit> = labeled
        .iter()
        .filter_map(|&t| {
            let k = flagged.partition_point(|&f| f < t);
            let f = *flagged.get(k.checked_sub(1)?)?;
            let gap = t - f;
            (gap <= window).then_some(CooccurrenceHit {
                flagged: f,
                labeled: t,
                gap,
            })
        })
        .collect();
    let rate = (!labeled.is_empty()).then(|| hits.len() as f64 / labeled.len() as f64);
    CooccurrenceStats { hits, rate }
}

/// Cosine similarity of the trailing `window × window` blocks of two
/// attention maps, flattened row-major.
pub fn attention_cosine_similarity(a: &AttentionMatrix, b: &AttentionMatrix, window: usize) -> Result<f64> {
    if window == 0 || a.len() < window || b.len() < window {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be in 1..=min({}, {})",
            a.len(),
            b.len()
        )));
    }
    let tail = |m: &AttentionMatrix| {
        let t = m.len() - window;
        m.weights().slice(ndarray::s![t.., t..]).to_owned()
    };
    let (x, y) = (tail(a), tail(b));
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Token-level imbalance findings for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    /// TAI per position; `null` where undefined.
    pub tai: Vec<Option<f64>>,
    pub threshold: f64,
    pub flagged: Vec<usize>,
    pub labeled: Vec<usize>,
    pub window: usize,
    pub hits: Vec<CooccurrenceHit>,
    pub rate: Option<f64>,
}

impl ImbalanceReport {
    pub fn build(tai: Vec<Option<f64>>, threshold: f64, labeled: Vec<usize>, window: usize) -> Self {
        let flagged = detect_defined(&tai, threshold);
        let stats = cooccurrence_stats(&flagged, &labeled, window);
        Self {
            tai,
            threshold,
            flagged,
            labeled,
            window,
            hits: stats.hits,
            rate: stats.rate,
        }
    }

    /// One row per position: `token_index,tai,flagged,labeled,paired_flag,gap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token_index,tai,flagged,labeled,paired_flag,gap\n");
        for (i, v) in self.tai.iter().enumerate() {
            let hit = self.hits.iter().find(|h| h.labeled == i);
            out.push_str(&format!(
                "{i},{},{},{},{},{}\n",
                crate::numfmt::opt_num(*v),
                self.flagged.binary_search(&i).is_ok(),
                self.labeled.contains(&i),
                hit.map(|h| h.flagged.to_string()).unwrap_or_default(),
                hit.map(|h| h.gap.to_string()).unwrap_or_default(),
            ));
        }
        out
    }
}
