// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::theory::walk::WalkSpec;

/// `|tr W| ≤ UNIFORM_TRACE_TOL · √d` counts as "close to zero".
pub const UNIFORM_TRACE_TOL: f64 = 0.1;

/// Leading-order mean and variance of `⟨γ^i, ω⟩ + γ₀^i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanVar {
    pub mean: f64,
    pub variance: f64,
}

fn check_index(spec: &WalkSpec, i: usize) -> Result<()> {
    if i == 0 || i > spec.t {
        return Err(Error::InvalidArgument(format!("token index {i} outside 1..={}", spec.t)));
    }
    Ok(())
}

/// `μ^i = (i/T - 1/2) tr(W)/√d`, `v^i = (2i²/T² + 7/12) tr(W²)/d`.
pub fn lemma2_mu_v(spec: &WalkSpec, i: usize) -> Result<MeanVar> {
    check_index(spec, i)?;
    let (tr, tr2) = spec.traces()?;
    let d = spec.d as f64;
    let theta = i as f64 / spec.t as f64;
    Ok(MeanVar {
        mean: (theta - 0.5) * tr / d.sqrt(),
        variance: (2.0 * theta * theta + 7.0 / 12.0) * tr2 / d,
    })
}

/// Finite-`T` mean and variance of `⟨γ^i, ω⟩ + γ₀^i` for a symmetric
/// analytic `W_QK`, under `spec.walk_convention`.
///
/// Writing `y = x_i - x̄` and `x_T` as linear combinations of the walk
/// increments with coefficient vectors α, β (per whitened coordinate),
/// `yᵀW_QK x_T` has mean `(α·β) tr(W)` and variance
/// `(|α|²|β|² + (α·β)²) tr(W²)`.
pub fn lemma2_exact(spec: &WalkSpec, i: usize) -> Result<MeanVar> {
    check_index(spec, i)?;
    let (tr, tr2) = spec.traces()?;
    let t = spec.t;
    let tf = t as f64;
    let mut a = 0.0;
    let mut c = 0.0;
    // increment k (1-based) enters x_j for j > k; the x_1 draw of the
    // Gaussian convention cancels in y
    for k in 1..t {
        let alpha = if k < i { 1.0 } else { 0.0 } - (t - k) as f64 / tf;
        a += alpha * alpha;
        c += alpha;
    }
    let b = spec.walk_convention.steps_to(t) as f64;
    let d = spec.d as f64;
    Ok(MeanVar {
        mean: c * tr / (tf * d.sqrt()) + 1.0 / tf,
        variance: (a * b + c * c) * tr2 / (tf * tf * d),
    })
}

/// Large-`T` limit of [`lemma2_exact`] at `θ = i/T`:
/// mean `(θ - 1/2) tr(W)/√d`, variance `(2θ² - 2θ + 7/12) tr(W²)/d`.
pub fn limit_mu_v(spec: &WalkSpec, theta: f64) -> Result<MeanVar> {
    let (tr, tr2) = spec.traces()?;
    let d = spec.d as f64;
    Ok(MeanVar {
        mean: (theta - 0.5) * tr / d.sqrt(),
        variance: (2.0 * theta * theta - 2.0 * theta + 7.0 / 12.0) * tr2 / d,
    })
}

/// Probability that `N(μ, v)` lands in `[0, 1]`.
pub fn rho_index(mu: f64, v: f64) -> Result<f64> {
    if !(v > 0.0) || !v.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("rho needs finite mean and v > 0, got mu={mu}, v={v}")));
    }
    let s = (2.0 * v).sqrt();
    Ok((0.5 * (erf((1.0 - mu) / s) + erf(mu / s))).clamp(0.0, 1.0))
}

/// Closed-form token propagation probability at `θ ∈ [0, 1]`.
pub fn rho_theta(spec: &WalkSpec, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
    }
    let (tr, tr2) = spec.traces()?;
    rho_theta_from_traces(tr, tr2, spec.d, theta)
}

pub fn rho_theta_from_traces(tr: f64, tr2: f64, d: usize, theta: f64) -> Result<f64> {
    if !(tr2 > 0.0) {
        return Err(Error::InvalidArgument(format!("rho(theta) needs tr(W^2) > 0, got {tr2}")));
    }
    let den = tr2.sqrt() * (4.0 * theta * theta + 7.0 / 6.0).sqrt();
    let hi = (theta - 0.5) * tr / den;
    let lo = ((theta - 0.5) * tr - (d as f64).sqrt()) / den;
    Ok((0.5 * (erf(hi) - erf(lo))).clamp(0.0, 1.0))
}

/// `θ* = 1/2 + √d / (2 tr W)`; `None` when `tr W = 0`.
pub fn peak_theta(tr: f64, d: usize) -> Option<f64> {
    (tr != 0.0).then(|| 0.5 + (d as f64).sqrt() / (2.0 * tr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoPoint {
    pub theta: f64,
    pub rho: f64,
}

/// `ρ(θ)` on `points` evenly spaced values covering `[0, 1]`.
pub fn rho_sweep(spec: &WalkSpec, points: usize) -> Result<Vec<RhoPoint>> {
    if points < 2 {
        return Err(Error::InvalidArgument("a rho sweep needs at least 2 points".into()));
    }
    let (tr, tr2) = spec.traces()?;
    (0..points)
        .map(|k| {
            let theta = k as f64 / (points - 1) as f64;
            Ok(RhoPoint {
                theta,
                rho: rho_theta_from_traces(tr, tr2, spec.d, theta)?,
            })
        })
        .collect()
}

/// Grid point with the largest `ρ`; the first one wins ties.
pub fn numeric_peak(sweep: &[RhoPoint]) -> Option<RhoPoint> {
    sweep.iter().copied().fold(None, |best, p| match best {
        Some(b) if b.rho >= p.rho => Some(b),
        _ => Some(p),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Localized,
    Uniform,
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub tr_w: f64,
    pub tr_w2: f64,
    /// `θ*` when it lies strictly inside `(0, 1)`.
    pub theta_star: Option<f64>,
}

pub fn classify_regime(spec: &WalkSpec) -> Result<RegimeReport> {
    classify_regime_with(spec, UNIFORM_TRACE_TOL)
}

pub fn classify_regime_with(spec: &WalkSpec, uniform_tol: f64) -> Result<RegimeReport> {
    let (tr, tr2) = spec.traces()?;
    if !(tr2 > 0.0) {
        return Err(Error::InvalidArgument(format!("regime needs tr(W^2) > 0, got {tr2}")));
    }
    let sd = (spec.d as f64).sqrt();
    let theta_star = peak_theta(tr, spec.d).filter(|t| *t > 0.0 && *t < 1.0);
    let regime = if tr.abs() >= sd && theta_star.is_some() {
        Regime::Localized
    } else if tr.abs() <= uniform_tol * sd {
        Regime::Uniform
    } else {
        Regime::Indeterminate
    };
    Ok(RegimeReport {
        regime,
        tr_w: tr,
        tr_w2: tr2,
        theta_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, array};

    fn scaled_identity(d: usize, t: usize, c: f64) -> WalkSpec {
        WalkSpec::identity(d, t, Array2::eye(d) * c).unwrap()
    }

    fn normal_interval_quadrature(mu: f64, v: f64) -> f64 {
        // composite Simpson on [0, 1]
        let n = 20_000;
        let h = 1.0 / n as f64;
        let pdf = |x: f64| (-(x - mu) * (x - mu) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let mut s = pdf(0.0) + pdf(1.0);
        for k in 1..n {
            s += pdf(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn rho_index_matches_quadrature() {
        let q = normal_interval_quadrature(0.3, 0.5);
        assert!((rho_index(0.3, 0.5).unwrap() - q).abs() < 1e-9);
    }

    #[test]
    fn rho_index_symmetric_and_limit_cases() {
        let v: f64 = 0.2;
        let want = erf(1.0 / (2.0 * (2.0 * v).sqrt()));
        assert!((rho_index(0.5, v).unwrap() - want).abs() < 1e-15);
        assert!(rho_index(0.5, 1e12).unwrap() < 1e-5);
        assert!(rho_index(0.5, 0.0).is_err());
        assert!(rho_index(0.5, -1.0).is_err());
    }

    #[test]
    fn worked_lemma2_values() {
        let s = scaled_identity(64, 256, 1.0);
        let mv = lemma2_mu_v(&s, 192).unwrap();
        assert!((mv.mean - 2.0).abs() < 1e-12);
        assert!((mv.variance - (2.0 * 0.5625 + 7.0 / 12.0)).abs() < 1e-12);
        assert_eq!(lemma2_mu_v(&s, 128).unwrap().mean, 0.0);
        assert!(lemma2_mu_v(&s, 0).is_err());
    }

    #[test]
    fn zero_trace_gives_zero_mean() {
        let w = array![[1.0, 0.0], [0.0, -1.0]];
        let s = WalkSpec::identity(2, 10, w).unwrap();
        for i in 1..=10 {
            assert_eq!(lemma2_mu_v(&s, i).unwrap().mean, 0.0);
        }
    }

    #[test]
    fn exact_moments_approach_limit() {
        let s = scaled_identity(16, 4096, 0.8);
        let ex = lemma2_exact(&s, 3072).unwrap();
        let lim = limit_mu_v(&s, 0.75).unwrap();
        assert!((ex.mean - lim.mean).abs() < 2e-3);
        assert!((ex.variance - lim.variance).abs() < 2e-3);
    }

    #[test]
    fn closed_form_equals_index_formula() {
        let s = WalkSpec::identity(9, 40, array![
            [0.4, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.1, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.6, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.3],
        ])
        .unwrap();
        for i in 1..=40 {
            let mv = lemma2_mu_v(&s, i).unwrap();
            let a = rho_index(mv.mean, mv.variance).unwrap();
            let b = rho_theta(&s, i as f64 / 40.0).unwrap();
            assert!((a - b).abs() < 1e-9, "i={i}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_trace_rho_decreases_in_theta() {
        let w = Array2::from_diag(&ndarray::Array1::from_iter((0..8).map(|k| if k % 2 == 0 { 0.5 } else { -0.5 })));
        let s = WalkSpec::identity(8, 10, w).unwrap();
        let sweep = rho_sweep(&s, 101).unwrap();
        let (_, tr2) = s.traces().unwrap();
        for p in &sweep {
            let want = 0.5 * erf((8f64).sqrt() / (tr2.sqrt() * (4.0 * p.theta * p.theta + 7.0 / 6.0).sqrt()));
            assert!((p.rho - want).abs() < 1e-14);
        }
        assert!(sweep.windows(2).all(|w| w[1].rho < w[0].rho));
        assert_eq!(classify_regime(&s).unwrap().regime, Regime::Uniform);
    }

    #[test]
    fn localized_peak_near_theta_star() {
        // W = (3/√d) I gives tr W = 3√d
        let d = 256;
        let s = scaled_identity(d, 10, 3.0 / (d as f64).sqrt());
        let r = classify_regime(&s).unwrap();
        assert_eq!(r.regime, Regime::Localized);
        let ts = r.theta_star.unwrap();
        assert!((ts - (0.5 + 1.0 / 6.0)).abs() < 1e-12);
        let peak = numeric_peak(&rho_sweep(&s, 2001).unwrap()).unwrap();
        assert!((peak.theta - ts).abs() <= 0.02, "{} vs {}", peak.theta, ts);
    }

    #[test]
    fn gap_case_is_indeterminate() {
        let d = 16;
        let s = scaled_identity(d, 10, 0.5 / (d as f64).sqrt());
        assert_eq!(classify_regime(&s).unwrap().regime, Regime::Indeterminate);
        let zero = WalkSpec::identity(2, 4, Array2::zeros((2, 2))).unwrap();
        assert!(rho_theta(&zero, 0.5).is_err());
        assert!(classify_regime(&zero).is_err());
    }
}
