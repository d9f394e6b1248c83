// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded Monte Carlo oracles for the theory formulas.
//!
//! Samples are split over a fixed number of ChaCha8 streams (same seed,
//! stream id = index). Streams run in parallel and merge in index order,
//! so results do not depend on the thread count.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::theory::moments::{GaussianMoments, WalkMoments};
use crate::theory::rho::{lemma2_mu_v, rho_index, rho_theta};
use crate::theory::walk::{check_symmetric, psd_sqrt, WalkConvention, WalkSpec};

pub const DEFAULT_STREAMS: usize = 8;
pub const DEFAULT_Z: f64 = 3.0;
/// Additive allowance for the asymptotic mean/variance at `T = 256`.
pub const LEMMA2_ALLOWANCE_AT_256: f64 = 0.1;
/// Additive allowance for `ρ` comparisons.
pub const RHO_ALLOWANCE: f64 = 0.05;
pub const MIN_RHO_SAMPLES: usize = 1000;

/// Allowance for dropped `o(1)` terms, scaled as `c/T`.
pub fn asymptotic_allowance(t: usize) -> f64 {
    LEMMA2_ALLOWANCE_AT_256 * 256.0 / t.max(1) as f64
}

/// Streaming central moments up to order four, mergeable.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let delta = o.mean - self.mean;
        let d2 = delta * delta;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3 + o.m3 + d2 * delta * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * o.m3 - nb * self.m3) / n;
        self.mean += delta * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.n += o.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 { 0.0 } else { self.m2 / (self.n - 1) as f64 }
    }

    pub fn mean_estimate(&self) -> Estimate {
        Estimate {
            value: self.mean,
            std_error: (self.variance() / self.n.max(1) as f64).sqrt(),
            samples: self.n,
        }
    }

    /// Sample variance with the large-sample standard error
    /// `sqrt((m₄ - s⁴)/n)`.
    pub fn variance_estimate(&self) -> Estimate {
        let n = self.n.max(1) as f64;
        let s2 = self.variance();
        let m4 = self.m4 / n;
        Estimate {
            value: s2,
            std_error: ((m4 - s2 * s2).max(0.0) / n).sqrt(),
            samples: self.n,
        }
    }
}

/// A Monte Carlo point estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl Estimate {
    /// Binomial frequency with a Jeffreys-smoothed standard error
    /// (`p̃ = (k + 1/2)/(n + 1)`), which stays positive at `k = 0` or `k = n`.
    pub fn frequency(hits: u64, samples: u64) -> Self {
        let n = samples.max(1) as f64;
        let pt = (hits as f64 + 0.5) / (n + 1.0);
        Estimate {
            value: hits as f64 / n,
            std_error: (pt * (1.0 - pt) / n).sqrt(),
            samples,
        }
    }
}

/// Analytic value against a Monte Carlo estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryResult {
    pub label: String,
    pub analytic: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub samples: u64,
    pub z: f64,
    pub abs_tol: f64,
    /// `|analytic - estimate| ≤ z·SE + abs_tol`
    pub agrees: bool,
}

impl TheoryResult {
    pub fn compare(label: impl Into<String>, analytic: f64, est: Estimate, z: f64, abs_tol: f64) -> Self {
        let agrees = (analytic - est.value).abs() <= z * est.std_error + abs_tol;
        Self {
            label: label.into(),
            analytic,
            estimate: est.value,
            std_error: est.std_error,
            samples: est.samples,
            z,
            abs_tol,
            agrees,
        }
    }

    /// `|analytic - estimate| / SE`.
    pub fn z_score(&self) -> f64 {
        (self.analytic - self.estimate).abs() / self.std_error
    }
}

/// Per-comparison z that keeps the family-wise two-sided miss rate of `m`
/// independent comparisons at that of a single comparison at `z`.
pub fn sidak_z(z: f64, m: usize) -> f64 {
    if m <= 1 {
        return z;
    }
    let p_single = erfc(z / std::f64::consts::SQRT_2);
    let p_each = -(-p_single).ln_1p() / m as f64;
    let p_each = -(-p_each).exp_m1();
    std::f64::consts::SQRT_2 * erfc_inv(p_each)
}

/// Runs `f(rng, n_k)` on each stream and returns results in stream order.
pub fn run_streams<T, F>(seed: u64, samples: usize, streams: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng, usize) -> T + Sync,
{
    let streams = streams.max(1);
    let base = samples / streams;
    let rem = samples % streams;
    (0..streams)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            f(&mut rng, base + usize::from(k < rem))
        })
        .collect()
}

fn normal_fill<R: Rng + ?Sized>(rng: &mut R, buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

fn matvec(m: &[f64], d: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * d..(r + 1) * d];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Monte Carlo estimates of the four Gaussian quadratic-form expectations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMonteCarlo {
    pub quad: Estimate,
    /// Upper-triangular entries of `E[xxᵀ]` (lower mirrors them).
    pub second: Array2<Estimate>,
    pub cubic: Estimate,
    pub quartic: Estimate,
}

pub fn mc_gaussian_moments(
    w: &Array2<f64>,
    sigma: &Array2<f64>,
    mu: &Array1<f64>,
    a: &Array1<f64>,
    samples: usize,
    seed: u64,
) -> Result<GaussianMonteCarlo> {
    let d = w.nrows();
    check_symmetric(w)?;
    if mu.len() != d || a.len() != d || sigma.dim() != (d, d) {
        return Err(Error::shape("gaussian monte carlo", d, mu.len()));
    }
    let root = flat(&psd_sqrt(sigma)?);
    let wf = flat(w);
    let mu = mu.to_vec();
    let a = a.to_vec();
    let parts = run_streams(seed, samples, DEFAULT_STREAMS, |rng, n| {
        let mut acc = [Moments::default(); 3];
        let mut second = vec![Moments::default(); d * d];
        let (mut z, mut x, mut wx) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for _ in 0..n {
            normal_fill(rng, &mut z);
            matvec(&root, d, &z, &mut x);
            x.iter_mut().zip(&mu).for_each(|(xi, m)| *xi += m);
            matvec(&wf, d, &x, &mut wx);
            let q = dot(&x, &wx);
            acc[0].push(q);
            acc[1].push(dot(&a, &wx) * q);
            acc[2].push(q * q);
            for r in 0..d {
                for c in r..d {
                    second[r * d + c].push(x[r] * x[c]);
                }
            }
        }
        (acc, second)
    });
    let mut acc = [Moments::default(); 3];
    let mut second = vec![Moments::default(); d * d];
    for (pa, ps) in &parts {
        for (t, s) in acc.iter_mut().zip(pa) {
            t.merge(s);
        }
        for (t, s) in second.iter_mut().zip(ps) {
            t.merge(s);
        }
    }
    let second = Array2::from_shape_fn((d, d), |(r, c)| {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        second[r * d + c].mean_estimate()
    });
    Ok(GaussianMonteCarlo {
        quad: acc[0].mean_estimate(),
        second,
        cubic: acc[1].mean_estimate(),
        quartic: acc[2].mean_estimate(),
    })
}

/// Compares analytic Gaussian moments with their Monte Carlo estimates.
///
/// The `E[xxᵀ]` row reports the worst upper-triangular entry, judged at a
/// Šidák-corrected z over the `d(d+1)/2` entries.
pub fn compare_gaussian(analytic: &GaussianMoments, mc: &GaussianMonteCarlo, z: f64) -> Vec<TheoryResult> {
    let d = analytic.second.nrows();
    let m = d * (d + 1) / 2;
    let ze = sidak_z(z, m);
    let mut worst: Option<TheoryResult> = None;
    for r in 0..d {
        for c in r..d {
            let res = TheoryResult::compare(format!("E[xx^T]({r},{c})"), analytic.second[[r, c]], mc.second[[r, c]], ze, 0.0);
            let ratio = (res.analytic - res.estimate).abs() / (ze * res.std_error).max(f64::MIN_POSITIVE);
            let keep = match &worst {
                Some(w) => ratio > (w.analytic - w.estimate).abs() / (ze * w.std_error).max(f64::MIN_POSITIVE),
                None => true,
            };
            if keep {
                worst = Some(res);
            }
        }
    }
    let mut second = worst.expect("d >= 1");
    second.label = format!("E[xx^T] worst entry {}", second.label.trim_start_matches("E[xx^T]"));
    vec![
        TheoryResult::compare("E[x^T W x]", analytic.quad, mc.quad, z, 0.0),
        second,
        TheoryResult::compare("E[a^T W x x^T W x]", analytic.cubic, mc.cubic, z, 0.0),
        TheoryResult::compare("E[x^T W x x^T W x]", analytic.quartic, mc.quartic, z, 0.0),
    ]
}

/// Monte Carlo estimates of the four walk expectations at `i ≤ j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WalkMonteCarlo {
    pub quad_i: Estimate,
    pub quartic_i: Estimate,
    pub cross: Estimate,
    pub mixed: Estimate,
}

/// Simulates walks step by step in whitened coordinates
/// (`x_t = Σ^{1/2} z_t`, `M = Σ^{1/2} W Σ^{1/2}`).
#[allow(clippy::too_many_arguments)]
pub fn mc_walk_moments(
    w: &Array2<f64>,
    sigma: &Array2<f64>,
    i: usize,
    j: usize,
    convention: WalkConvention,
    samples: usize,
    seed: u64,
) -> Result<WalkMonteCarlo> {
    check_symmetric(w)?;
    if i == 0 || i > j {
        return Err(Error::InvalidArgument(format!("walk moments need 1 <= i <= j, got i={i}, j={j}")));
    }
    let d = w.nrows();
    let root = psd_sqrt(sigma)?;
    let m = flat(&root.dot(w).dot(&root));
    let (si, sj) = (convention.steps_to(i), convention.steps_to(j));
    let parts = run_streams(seed, samples, DEFAULT_STREAMS, |rng, n| {
        let mut acc = [Moments::default(); 4];
        let (mut z, mut step, mut zi) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let (mut mzi, mut mzj) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..n {
            z.iter_mut().for_each(|v| *v = 0.0);
            if si == 0 {
                zi.copy_from_slice(&z);
            }
            for s in 1..=sj {
                normal_fill(rng, &mut step);
                z.iter_mut().zip(&step).for_each(|(a, b)| *a += b);
                if s == si {
                    zi.copy_from_slice(&z);
                }
            }
            matvec(&m, d, &zi, &mut mzi);
            matvec(&m, d, &z, &mut mzj);
            let qi = dot(&zi, &mzi);
            let qj = dot(&z, &mzj);
            let pij = dot(&zi, &mzj);
            acc[0].push(qi);
            acc[1].push(qi * qi);
            acc[2].push(qi * qj);
            acc[3].push(pij * qj);
        }
        acc
    });
    let mut acc = [Moments::default(); 4];
    for p in &parts {
        for (t, s) in acc.iter_mut().zip(p) {
            t.merge(s);
        }
    }
    Ok(WalkMonteCarlo {
        quad_i: acc[0].mean_estimate(),
        quartic_i: acc[1].mean_estimate(),
        cross: acc[2].mean_estimate(),
        mixed: acc[3].mean_estimate(),
    })
}

pub fn compare_walk(analytic: &WalkMoments, mc: &WalkMonteCarlo, z: f64) -> Vec<TheoryResult> {
    vec![
        TheoryResult::compare("E[q_i]", analytic.quad_i, mc.quad_i, z, 0.0),
        TheoryResult::compare("E[q_i^2]", analytic.quartic_i, mc.quartic_i, z, 0.0),
        TheoryResult::compare("E[q_i q_j]", analytic.cross, mc.cross, z, 0.0),
        TheoryResult::compare("E[x_i^T W x_j q_j]", analytic.mixed, mc.mixed, z, 0.0),
    ]
}

/// Monte Carlo summary of `⟨γ^i, ω⟩ + γ₀^i` at one token index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizedMonteCarlo {
    pub mean: Estimate,
    pub variance: Estimate,
    /// Frequency of the value landing in `[0, 1]`.
    pub in_unit: Estimate,
}

/// Samples full walks of length `T` and evaluates the linearized softmax
/// output of token `i` with the raw `spec.w_qk` (not symmetrized), i.e.
/// the quantity the closed forms approximate.
pub fn mc_linearized(spec: &WalkSpec, i: usize, samples: usize, seed: u64) -> Result<LinearizedMonteCarlo> {
    spec.validate()?;
    if i == 0 || i > spec.t {
        return Err(Error::InvalidArgument(format!("token index {i} outside 1..={}", spec.t)));
    }
    let (d, t) = (spec.d, spec.t);
    let root = psd_sqrt(&spec.sigma)?;
    let m = flat(&root.dot(&spec.w_qk).dot(&root));
    let first_step = usize::from(spec.walk_convention == WalkConvention::X1DeterministicZero);
    let scale = 1.0 / (t as f64 * (d as f64).sqrt());
    let base = 1.0 / t as f64;
    let parts = run_streams(seed, samples, DEFAULT_STREAMS, |rng, n| {
        let mut acc = Moments::default();
        let mut hits = 0u64;
        let (mut z, mut sum, mut zi) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut mz = vec![0.0; d];
        for _ in 0..n {
            z.iter_mut().for_each(|v| *v = 0.0);
            sum.iter_mut().for_each(|v| *v = 0.0);
            for col in 1..=t {
                if col > first_step {
                    for v in z.iter_mut() {
                        *v += rng.sample::<f64, _>(StandardNormal);
                    }
                }
                sum.iter_mut().zip(&z).for_each(|(s, v)| *s += v);
                if col == i {
                    zi.copy_from_slice(&z);
                }
            }
            // (z_i - mean_j z_j)ᵀ M z_T
            matvec(&m, d, &z, &mut mz);
            let tf = t as f64;
            let y: f64 = zi.iter().zip(&sum).zip(&mz).map(|((a, s), b)| (a - s / tf) * b).sum();
            let v = y * scale + base;
            acc.push(v);
            if (0.0..=1.0).contains(&v) {
                hits += 1;
            }
        }
        (acc, hits)
    });
    let mut acc = Moments::default();
    let mut hits = 0;
    for (a, h) in &parts {
        acc.merge(a);
        hits += h;
    }
    Ok(LinearizedMonteCarlo {
        mean: acc.mean_estimate(),
        variance: acc.variance_estimate(),
        in_unit: Estimate::frequency(hits, acc.count()),
    })
}

/// Monte Carlo `ρ_i` checked against the index formula and the closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct RhoCheck {
    pub i: usize,
    pub estimate: Estimate,
    /// Against `rho_index(lemma2_mu_v(i))`; `None` when `v^i = 0`.
    pub vs_index: Option<TheoryResult>,
    /// Against `rho_theta(i/T)`; `None` when `tr(W²) = 0`.
    pub vs_theta: Option<TheoryResult>,
}

pub fn monte_carlo_rho(spec: &WalkSpec, i: usize, samples: usize, seed: u64) -> Result<RhoCheck> {
    if samples < MIN_RHO_SAMPLES {
        return Err(Error::InvalidArgument(format!("monte carlo rho needs at least {MIN_RHO_SAMPLES} samples")));
    }
    let mc = mc_linearized(spec, i, samples, seed)?;
    rho_check_from(spec, i, &mc)
}

pub(crate) fn rho_check_from(spec: &WalkSpec, i: usize, mc: &LinearizedMonteCarlo) -> Result<RhoCheck> {
    let mv = lemma2_mu_v(spec, i)?;
    let vs_index = rho_index(mv.mean, mv.variance)
        .ok()
        .map(|r| TheoryResult::compare("rho_i index formula", r, mc.in_unit, DEFAULT_Z, RHO_ALLOWANCE));
    let vs_theta = rho_theta(spec, i as f64 / spec.t as f64)
        .ok()
        .map(|r| TheoryResult::compare("rho(theta)", r, mc.in_unit, DEFAULT_Z, RHO_ALLOWANCE));
    Ok(RhoCheck {
        i,
        estimate: mc.in_unit,
        vs_index,
        vs_theta,
    })
}

/// Mean, variance and `ρ` at token `i` against one Monte Carlo pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Lemma2Check {
    pub mean: TheoryResult,
    pub variance: TheoryResult,
    pub rho: RhoCheck,
}

pub fn lemma2_check(spec: &WalkSpec, i: usize, samples: usize, seed: u64) -> Result<Lemma2Check> {
    if samples < MIN_RHO_SAMPLES {
        return Err(Error::InvalidArgument(format!("linearized check needs at least {MIN_RHO_SAMPLES} samples")));
    }
    let mv = lemma2_mu_v(spec, i)?;
    let mc = mc_linearized(spec, i, samples, seed)?;
    let tol = asymptotic_allowance(spec.t);
    Ok(Lemma2Check {
        mean: TheoryResult::compare("mu_i", mv.mean, mc.mean, DEFAULT_Z, tol),
        variance: TheoryResult::compare("v_i", mv.variance, mc.variance, DEFAULT_Z, tol),
        rho: rho_check_from(spec, i, &mc)?,
    })
}
