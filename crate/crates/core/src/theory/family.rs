// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded instance generators for oracle runs.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::theory::walk::{symmetrize, WalkSpec};

pub fn random_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal))
}

pub fn random_matrix<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((d, d), || rng.sample(StandardNormal))
}

/// `(G + Gᵀ)/2` with standard normal `G`.
pub fn random_symmetric<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    symmetrize(&random_matrix(d, rng))
}

/// `B Bᵀ / d` with standard normal `B`, symmetrized against rounding.
pub fn random_psd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Array2<f64> {
    let b = random_matrix(d, rng);
    symmetrize(&(b.dot(&b.t()) / d as f64))
}

/// `Σ = I`, `W_QK = (c/√d) I + δ·P` with `P` a unit-Frobenius zero-trace
/// symmetric perturbation, so `tr W = c√d` exactly.
pub fn localized_spec(d: usize, t: usize, c: f64, delta: f64, seed: u64) -> Result<WalkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = random_symmetric(d, &mut rng);
    let mean_diag = p.diag().sum() / d as f64;
    p.diag_mut().mapv_inplace(|v| v - mean_diag);
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        p /= norm;
    }
    let w = Array2::<f64>::eye(d) * (c / (d as f64).sqrt()) + p * delta;
    WalkSpec::identity(d, t, w)
}

/// Random symmetric `W_QK` scaled to `tr(W²)/d = 1` under a random
/// well-conditioned `Σ = (I + BBᵀ/d)/2`.
pub fn random_walk_spec(d: usize, t: usize, seed: u64) -> Result<WalkSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (Array2::<f64>::eye(d) + random_psd(d, &mut rng)) * 0.5;
    let w = random_symmetric(d, &mut rng);
    let mut spec = WalkSpec::new(d, t, symmetrize(&sigma), w)?;
    let (_, tr2) = spec.traces()?;
    spec.w_qk *= (d as f64 / tr2).sqrt();
    Ok(spec)
}
