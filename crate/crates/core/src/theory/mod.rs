// SPDX-License-Identifier: MIT OR Apache-2.0

//! Random-walk analysis of softmax localization: the linearized softmax,
//! Gaussian quadratic-form moments, the token propagation probability ρ,
//! regime classification, and variance/entropy of attention rows. Every
//! closed form has a seeded Monte Carlo counterpart in [`mc`].
//!
//! [`walk_quadratic_moments`] and [`lemma2_mu_v`] are the polynomial
//! closed forms; [`walk_quadratic_moments_exact`] and [`lemma2_exact`] give
//! the values the oracles actually converge to.

mod entropy;
pub mod family;
pub mod mc;
mod moments;
mod rho;
mod walk;

pub use entropy::{distribution_variance_entropy, row_variance_entropy, tempered_path};
pub use mc::{monte_carlo_rho, Estimate, RhoCheck, TheoryResult};
pub use moments::{
    gaussian_quadratic_moments, softmax_linearization, walk_quadratic_moments, walk_quadratic_moments_exact,
    GaussianMoments, Linearization, WalkMoments,
};
pub use rho::{
    classify_regime, classify_regime_with, lemma2_exact, lemma2_mu_v, limit_mu_v, numeric_peak, peak_theta,
    rho_index, rho_sweep, rho_theta, rho_theta_from_traces, MeanVar, Regime, RegimeReport, RhoPoint,
    UNIFORM_TRACE_TOL,
};
pub use walk::{psd_sqrt, sample_walk_with, symmetrize, WalkConvention, WalkSpec, PSD_TOL, SYMMETRY_TOL};
