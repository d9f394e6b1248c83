// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained SVG heatmaps of attention dumps.

use std::fmt::Write;

use ndarray::Array2;

use crate::attn::snapshot::matrix_from_csv;
use crate::attn::{parse_modality_string, Modality};
use crate::error::{Error, Result};

/// Fill behind the plot; cells never drawn show this color.
pub const BACKGROUND: &str = "#eeeeee";
/// Color of the largest value; the smallest maps to white.
pub const HIGH_RGB: (u8, u8, u8) = (8, 48, 107);

const PLOT: f64 = 512.0;
const MARGIN: f64 = 48.0;
const MAX_TICKS: usize = 16;

/// Matrix plus optional per-position modality tags read from a CSV dump.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDump {
    pub matrix: Array2<f64>,
    pub modalities: Option<Vec<Modality>>,
}

impl MatrixDump {
    pub fn parse(text: &str) -> Result<Self> {
        let mut modalities = None;
        for line in text.lines() {
            if let Some(rest) = line.trim().strip_prefix("# modalities:") {
                let rest = rest.trim();
                modalities = Some(
                    parse_modality_string(rest)
                        .ok_or_else(|| Error::InvalidArgument(format!("bad modality line {rest:?}")))?,
                );
            }
        }
        let matrix = matrix_from_csv(text)?;
        if matrix.is_empty() {
            return Err(Error::InvalidArgument("heatmap input has no values".into()));
        }
        if let Some(m) = &modalities {
            if m.len() != matrix.nrows() {
                return Err(Error::shape("modality line", matrix.nrows(), m.len()));
            }
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("heatmap input has non-finite values".into()));
        }
        Ok(Self { matrix, modalities })
    }
}

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let mix = |hi: u8| (255.0 + (f64::from(hi) - 255.0) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(HIGH_RGB.0), mix(HIGH_RGB.1), mix(HIGH_RGB.2))
}

/// True when the matrix is square with exact zeros above the diagonal.
fn causal_layout(m: &Array2<f64>) -> bool {
    m.is_square() && m.indexed_iter().all(|((i, j), &v)| j <= i || v == 0.0)
}

/// Renders `dump` as SVG. Values map linearly from `min(0, min)` (white)
/// to the maximum; in causal matrices the strictly upper triangle is not
/// drawn. Modality changes get rule lines on both axes.
pub fn render_svg(dump: &MatrixDump) -> String {
    let m = &dump.matrix;
    let (rows, cols) = m.dim();
    let lo = m.iter().copied().fold(0.0, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = PLOT / rows.max(cols) as f64;
    let (w, h) = (cols as f64 * cell, rows as f64 * cell);
    let skip_upper = causal_layout(m);

    let mut s = String::new();
    let total_w = w + 2.0 * MARGIN;
    let total_h = h + 2.0 * MARGIN;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.2}" height="{total_h:.2}" viewBox="0 0 {total_w:.2} {total_h:.2}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{total_w:.2}" height="{total_h:.2}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect id="plot" x="{MARGIN:.2}" y="{MARGIN:.2}" width="{w:.2}" height="{h:.2}" fill="{BACKGROUND}"/>"#
    );
    let _ = writeln!(s, r#"<g id="cells" shape-rendering="crispEdges">"#);
    for ((i, j), &v) in m.indexed_iter() {
        if skip_upper && j > i {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" data-i="{i}" data-j="{j}"/>"#,
            MARGIN + j as f64 * cell,
            MARGIN + i as f64 * cell,
            color((v - lo) / span)
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="ticks" font-family="monospace" font-size="10" fill="black">"#);
    let step = rows.max(cols).div_ceil(MAX_TICKS).max(1);
    for j in (0..cols).step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{j}</text>"#,
            MARGIN + (j as f64 + 0.5) * cell,
            MARGIN - 6.0
        );
    }
    for i in (0..rows).step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" dominant-baseline="middle">{i}</text>"#,
            MARGIN - 6.0,
            MARGIN + (i as f64 + 0.5) * cell
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">key index</text>"#,
        MARGIN + w / 2.0,
        MARGIN - 24.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">query index</text>"#,
        MARGIN - 30.0,
        MARGIN + h / 2.0,
        MARGIN - 30.0,
        MARGIN + h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}">scale {} .. {}</text>"#,
        MARGIN,
        MARGIN + h + 20.0,
        crate::numfmt::num(lo),
        crate::numfmt::num(if hi > lo { hi } else { lo + 1.0 })
    );
    let _ = writeln!(s, "</g>");

    if let Some(mods) = &dump.modalities {
        let _ = writeln!(s, r#"<g id="modality-rules" stroke="red" stroke-width="1.5">"#);
        for k in 1..mods.len() {
            if mods[k] != mods[k - 1] {
                let at = k as f64 * cell;
                if k < cols {
                    let _ = writeln!(
                        s,
                        r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}"/>"#,
                        MARGIN,
                        MARGIN + h,
                        x = MARGIN + at
                    );
                }
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#,
                    MARGIN,
                    MARGIN + w,
                    y = MARGIN + at
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Parses a CSV dump and renders it.
pub fn emit_heatmap(csv: &str) -> Result<String> {
    Ok(render_svg(&MatrixDump::parse(csv)?))
}
