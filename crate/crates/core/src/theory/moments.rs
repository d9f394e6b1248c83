// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::walk::{check_symmetric, psd_sqrt};

/// First-order expansion of the softmax at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearization {
    /// Row `i` is `γ^i = e_i/T - 𝟏/T²`.
    pub gamma: Array2<f64>,
    /// `γ₀^i = 1/T`.
    pub gamma0: Array1<f64>,
}

impl Linearization {
    /// `⟨γ^i, ω⟩ + γ₀^i` for every `i`, before clipping.
    pub fn affine(&self, omega: &Array1<f64>) -> Array1<f64> {
        self.gamma.dot(omega) + &self.gamma0
    }

    /// Clipped-affine approximation `max(0, min(1, ·))` of the softmax.
    pub fn clipped(&self, omega: &Array1<f64>) -> Array1<f64> {
        self.affine(omega).mapv(|v| v.clamp(0.0, 1.0))
    }
}

pub fn softmax_linearization(t: usize) -> Result<Linearization> {
    if t == 0 {
        return Err(Error::InvalidArgument("linearization needs T >= 1".into()));
    }
    let tf = t as f64;
    let off = 1.0 / (tf * tf);
    let gamma = Array2::from_shape_fn((t, t), |(i, j)| if i == j { 1.0 / tf - off } else { -off });
    Ok(Linearization {
        gamma,
        gamma0: Array1::from_elem(t, 1.0 / tf),
    })
}

/// The four Gaussian quadratic-form expectations for `x ~ N(μ, Σ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    /// `E[xᵀWx]`
    pub quad: f64,
    /// `E[xxᵀ]`
    pub second: Array2<f64>,
    /// `E[aᵀWx xᵀWx]`
    pub cubic: f64,
    /// `E[xᵀWx xᵀWx]`
    pub quartic: f64,
}

fn check_dims(w: &Array2<f64>, sigma: &Array2<f64>, vecs: &[&Array1<f64>]) -> Result<usize> {
    let d = w.nrows();
    if w.dim() != (d, d) || sigma.dim() != (d, d) {
        return Err(Error::shape("quadratic moments", format!("{d}x{d} W and Σ"), format!("{:?} / {:?}", w.dim(), sigma.dim())));
    }
    for v in vecs {
        if v.len() != d {
            return Err(Error::shape("quadratic moments vector", d, v.len()));
        }
    }
    Ok(d)
}

pub fn gaussian_quadratic_moments(
    w: &Array2<f64>,
    sigma: &Array2<f64>,
    mu: &Array1<f64>,
    a: &Array1<f64>,
) -> Result<GaussianMoments> {
    check_dims(w, sigma, &[mu, a])?;
    check_symmetric(w)?;
    psd_sqrt(sigma)?;
    let ws = w.dot(sigma);
    let tr = ws.diag().sum();
    let tr2 = (&ws * &ws.t()).sum();
    let wmu = w.dot(mu);
    let mwm = mu.dot(&wmu);
    let wsw_mu = w.dot(&sigma.dot(&wmu));
    let aw = a.dot(w);
    let outer = Array2::from_shape_fn(sigma.dim(), |(i, j)| mu[i] * mu[j]);
    Ok(GaussianMoments {
        quad: tr + mwm,
        second: sigma + &outer,
        cubic: 2.0 * aw.dot(&sigma.dot(&wmu)) + aw.dot(mu) * (tr + mwm),
        quartic: 2.0 * tr2 + tr * tr + 4.0 * mu.dot(&wsw_mu) + 2.0 * tr * mwm + mwm * mwm,
    })
}

/// The four random-walk quadratic-form expectations for token indices `i ≤ j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkMoments {
    /// `E[x_iᵀWx_i]`
    pub quad_i: f64,
    /// `E[(x_iᵀWx_i)²]`
    pub quartic_i: f64,
    /// `E[x_iᵀWx_i · x_jᵀWx_j]`
    pub cross: f64,
    /// `E[x_iᵀWx_j · x_jᵀWx_j]`
    pub mixed: f64,
}

fn walk_traces(w: &Array2<f64>, sigma: &Array2<f64>, i: usize, j: usize) -> Result<(f64, f64)> {
    check_dims(w, sigma, &[])?;
    check_symmetric(w)?;
    psd_sqrt(sigma)?;
    if i == 0 || i > j {
        return Err(Error::InvalidArgument(format!("walk moments need 1 <= i <= j, got i={i}, j={j}")));
    }
    let ws = w.dot(sigma);
    Ok((ws.diag().sum(), (&ws * &ws.t()).sum()))
}

/// The polynomial closed forms for the walk block.
///
/// Under the zero-start convention the first one is exact; the three
/// fourth-moment polynomials are not (see [`walk_quadratic_moments_exact`]).
pub fn walk_quadratic_moments(w: &Array2<f64>, sigma: &Array2<f64>, i: usize, j: usize) -> Result<WalkMoments> {
    let (tr, tr2) = walk_traces(w, sigma, i, j)?;
    let (i, j) = (i as f64, j as f64);
    let base = 2.0 * tr2 + tr * tr;
    Ok(WalkMoments {
        quad_i: (i - 1.0) * tr,
        quartic_i: (i * i - 2.0 * i + 2.0) * base,
        cross: (i * i + i * j - 3.0 * i - j + 4.0) * tr2 + (i * i - 2.0 * i + 2.0) * tr * tr,
        mixed: (i * j - i - j + 2.0) * base,
    })
}

/// Exact walk moments under the zero-start convention.
///
/// With `p = i-1`, `q = j-1`: `x_i ~ N(0, pΣ)` and `x_j = x_i + D` with
/// `D ~ N(0, (q-p)Σ)` independent, which gives
/// `E[q_i²] = p²(2tr₂ + tr²)`, `E[q_i q_j] = 2p²tr₂ + pq·tr²` and
/// `E[x_iᵀWx_j q_j] = pq(2tr₂ + tr²)`.
pub fn walk_quadratic_moments_exact(w: &Array2<f64>, sigma: &Array2<f64>, i: usize, j: usize) -> Result<WalkMoments> {
    let (tr, tr2) = walk_traces(w, sigma, i, j)?;
    let (p, q) = ((i - 1) as f64, (j - 1) as f64);
    let base = 2.0 * tr2 + tr * tr;
    Ok(WalkMoments {
        quad_i: p * tr,
        quartic_i: p * p * base,
        cross: 2.0 * p * p * tr2 + p * q * tr * tr,
        mixed: p * q * base,
    })
}
