// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute symmetry tolerance, scaled by `max(1, max |entry|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_TOL` count as non-negative; those below it reject.
pub const PSD_TOL: f64 = 1e-10;

/// How the first token of a walk is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WalkConvention {
    /// `x_1 = 0`, so `Cov(x_i) = (i-1) Σ`. This is the convention under which
    /// `E[x_iᵀ W x_i] = (i-1) tr(WΣ)` holds.
    #[default]
    X1DeterministicZero,
    /// `x_1 ~ N(0, Σ)`, so `Cov(x_i) = i Σ`.
    X1Gaussian,
}

impl WalkConvention {
    /// Number of i.i.d. `N(0, Σ)` increments summed into token `i` (1-based).
    pub fn steps_to(self, i: usize) -> usize {
        match self {
            WalkConvention::X1DeterministicZero => i.saturating_sub(1),
            WalkConvention::X1Gaussian => i,
        }
    }
}

/// Gaussian random-walk token model together with a query-key matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkSpec {
    pub d: usize,
    pub t: usize,
    pub sigma: Array2<f64>,
    pub w_qk: Array2<f64>,
    /// Use `(W_QK + W_QKᵀ)/2` in every analytic formula.
    pub symmetrized: bool,
    pub walk_convention: WalkConvention,
}

pub(crate) fn max_asymmetry(m: &Array2<f64>) -> f64 {
    let mut worst = 0.0f64;
    for ((i, j), v) in m.indexed_iter() {
        if j > i {
            worst = worst.max((v - m[[j, i]]).abs());
        }
    }
    worst
}

pub(crate) fn check_symmetric(m: &Array2<f64>) -> Result<()> {
    let scale = m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    Ok(())
}

pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    (m + &m.t()) * 0.5
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Symmetric PSD square root of a covariance matrix.
///
/// Rejects asymmetric input and eigenvalues below `-PSD_TOL`; eigenvalues
/// in `[-PSD_TOL, PSD_TOL)` are clamped to zero.
pub fn psd_sqrt(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::shape("covariance", "square matrix", format!("{:?}", sigma.dim())));
    }
    check_symmetric(sigma)?;
    if sigma.is_empty() {
        return Ok(sigma.clone());
    }
    let eig = SymmetricEigen::new(to_na(sigma));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL {
        return Err(Error::NotPsd { min_eigenvalue: min });
    }
    let roots = eig.eigenvalues.map(|l| if l < PSD_TOL { 0.0 } else { l.sqrt() });
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let r = from_na(&r);
    Ok(symmetrize(&r))
}

impl WalkSpec {
    /// Validated spec with `Σ = I` and the default convention.
    pub fn new(d: usize, t: usize, sigma: Array2<f64>, w_qk: Array2<f64>) -> Result<Self> {
        let spec = Self {
            d,
            t,
            sigma,
            w_qk,
            symmetrized: true,
            walk_convention: WalkConvention::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity(d: usize, t: usize, w_qk: Array2<f64>) -> Result<Self> {
        Self::new(d, t, Array2::eye(d), w_qk)
    }

    pub fn with_convention(mut self, c: WalkConvention) -> Self {
        self.walk_convention = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.t == 0 {
            return Err(Error::InvalidArgument("walk spec needs d >= 1 and T >= 1".into()));
        }
        if self.sigma.dim() != (self.d, self.d) {
            return Err(Error::shape("walk covariance", format!("({0}, {0})", self.d), format!("{:?}", self.sigma.dim())));
        }
        if self.w_qk.dim() != (self.d, self.d) {
            return Err(Error::shape("walk W_QK", format!("({0}, {0})", self.d), format!("{:?}", self.w_qk.dim())));
        }
        psd_sqrt(&self.sigma).map(|_| ())
    }

    /// The query-key matrix the analytic formulas use.
    ///
    /// Symmetrized when the flag is set; otherwise it must already be
    /// symmetric.
    pub fn analytic_wqk(&self) -> Result<Array2<f64>> {
        if self.symmetrized {
            Ok(symmetrize(&self.w_qk))
        } else {
            check_symmetric(&self.w_qk)?;
            Ok(self.w_qk.clone())
        }
    }

    /// `W := W_QK Σ` with the analytic `W_QK`.
    pub fn w(&self) -> Result<Array2<f64>> {
        Ok(self.analytic_wqk()?.dot(&self.sigma))
    }

    /// `(tr W, tr W²)`.
    pub fn traces(&self) -> Result<(f64, f64)> {
        let w = self.w()?;
        let tr = w.diag().sum();
        let tr2 = (&w * &w.t()).sum();
        Ok((tr, tr2))
    }

    /// Draws one `d × T` walk.
    pub fn sample_walk(&self, seed: u64) -> Result<Array2<f64>> {
        let root = psd_sqrt(&self.sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(sample_walk_with(&root, self.t, self.walk_convention, &mut rng))
    }
}

/// Walk sampler with a precomputed `Σ^{1/2}`.
pub fn sample_walk_with<R: Rng + ?Sized>(
    sigma_root: &Array2<f64>,
    t: usize,
    convention: WalkConvention,
    rng: &mut R,
) -> Array2<f64> {
    let d = sigma_root.nrows();
    let mut out = Array2::zeros((d, t));
    let mut cur = Array1::<f64>::zeros(d);
    let mut z = Array1::<f64>::zeros(d);
    for col in 0..t {
        if col > 0 || convention == WalkConvention::X1Gaussian {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            cur += &sigma_root.dot(&z);
        }
        out.column_mut(col).assign(&cur);
    }
    out
}
