// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attn::{HeadWeights, TokenSequence};
use crate::error::{Error, Result};

/// Tolerance for treating a row as a probability distribution.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// A `(layer, head)` coordinate, zero-based.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// A square attention weight matrix; `weights[[i, j]]` is the weight from
/// query `i` to key `j`.
///
/// `row_stochastic` holds when every row is a distribution. Rectified
/// matrices clear the flag.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    weights: Array2<f64>,
    head: Option<HeadId>,
    row_stochastic: bool,
}

impl AttentionMatrix {
    /// Wraps a square finite matrix, inferring the row-stochastic flag.
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let (r, c) = weights.dim();
        if r != c {
            return Err(Error::shape("attention matrix", format!("{r}x{r}"), format!("{r}x{c}")));
        }
        if let Some(row) = weights
            .rows()
            .into_iter()
            .position(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFiniteScores { row });
        }
        let row_stochastic = rows_are_stochastic(weights.view());
        Ok(Self {
            weights,
            head: None,
            row_stochastic,
        })
    }

    /// Internal constructor for results whose flag is known by construction.
    pub(crate) fn from_parts(weights: Array2<f64>, head: Option<HeadId>, row_stochastic: bool) -> Self {
        Self {
            weights,
            head,
            row_stochastic,
        }
    }

    pub fn with_head(mut self, head: HeadId) -> Self {
        self.head = Some(head);
        self
    }

    pub fn head(&self) -> Option<HeadId> {
        self.head
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn into_weights(self) -> Array2<f64> {
        self.weights
    }

    /// Sequence length `T`.
    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    /// Exact zeros strictly above the diagonal.
    pub fn is_causal(&self) -> bool {
        is_causal(self.weights.view())
    }

    /// Attention mass received by each key: `sum_i a[i][j]`.
    pub fn column_masses(&self) -> Vec<f64> {
        self.weights.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn grand_sum(&self) -> f64 {
        self.weights.sum()
    }

    pub fn trace(&self) -> f64 {
        self.weights.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn is_causal(w: ArrayView2<'_, f64>) -> bool {
    w.indexed_iter().all(|((i, j), &v)| j <= i || v == 0.0)
}

pub(crate) fn rows_are_stochastic(w: ArrayView2<'_, f64>) -> bool {
    w.rows().into_iter().all(|row| {
        row.iter().all(|&v| v >= 0.0) && (row.sum() - 1.0).abs() <= STOCHASTIC_TOL
    })
}

/// Row-wise softmax of a square score matrix, stabilised by row-max
/// subtraction. With `causal_mask`, entries above the diagonal are treated
/// as `-inf` and come out as exact zeros.
pub fn softmax_rows(scores: &Array2<f64>, causal_mask: bool) -> Result<AttentionMatrix> {
    let (t, c) = scores.dim();
    if t != c {
        return Err(Error::shape("score matrix", format!("{t}x{t}"), format!("{t}x{c}")));
    }
    let mut out = Array2::<f64>::zeros((t, t));
    for (i, row) in scores.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteScores { row: i });
        }
        let width = if causal_mask { i + 1 } else { t };
        let max = row
            .iter()
            .take(width)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            total += e;
        }
        for j in 0..width {
            out[[i, j]] /= total;
        }
    }
    Ok(AttentionMatrix::from_parts(out, None, true))
}

/// Scaled bilinear scores `X^T W_QK X / sqrt(d)` for a `d × T` hidden matrix.
pub(crate) fn qk_scores(hidden: ArrayView2<'_, f64>, w_qk: &Array2<f64>) -> Array2<f64> {
    let d = hidden.nrows() as f64;
    let left = hidden.t().dot(w_qk);
    left.dot(&hidden) / d.sqrt()
}

/// Causal attention of one head over a token sequence:
/// `softmax((X^T W_QK X) / sqrt(d))` with the causal mask.
pub fn compute_head_attention(x: &TokenSequence, head: &HeadWeights) -> Result<AttentionMatrix> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("token sequence is empty".into()));
    }
    let d = x.dim();
    if head.w_qk.dim() != (d, d) {
        return Err(Error::shape(
            "W_QK",
            format!("{d}x{d}"),
            format!("{:?}", head.w_qk.dim()),
        ));
    }
    softmax_rows(&qk_scores(x.embeddings().view(), &head.w_qk), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::Modality;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_scores_give_uniform_causal_rows() {
        let a = softmax_rows(&Array2::zeros((3, 3)), true).unwrap();
        let w = a.weights();
        assert_eq!(w.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(w[[1, 0]], 0.5);
        for j in 0..3 {
            assert_abs_diff_eq!(w[[2, j]], 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn exp_ratio_non_causal() {
        let scores = array![[0.0, 3f64.ln()], [0.0, 0.0]];
        let a = softmax_rows(&scores, false).unwrap();
        assert_abs_diff_eq!(a.weights()[[0, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(a.weights()[[0, 1]], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn random_causal_rows_normalise() {
        let a = softmax_rows(&random_matrix(5, 5, 7), true).unwrap();
        assert!(a.row_stochastic());
        for i in 0..5 {
            assert!((a.weights().row(i).sum() - 1.0).abs() <= 1e-9);
            for j in (i + 1)..5 {
                assert_eq!(a.weights()[[i, j]], 0.0);
            }
        }
        assert!(a.is_causal());
    }

    #[test]
    fn non_finite_row_is_named() {
        let mut s = Array2::zeros((3, 3));
        s[[2, 0]] = f64::NAN;
        match softmax_rows(&s, true) {
            Err(Error::NonFiniteScores { row }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let s = array![[1000.0, 0.0], [1000.0, 999.0]];
        let a = softmax_rows(&s, true).unwrap();
        assert!(a.weights().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(a.weights()[[1, 0]], 1.0 / (1.0 + (-1f64).exp()), epsilon = 1e-12);
    }

    fn seq(d: usize, t: usize, seed: u64) -> TokenSequence {
        TokenSequence::new(random_matrix(d, t, seed), vec![Modality::Text; t], vec![None; t]).unwrap()
    }

    #[test]
    fn zero_wqk_gives_uniform_attention() {
        let head = HeadWeights {
            w_qk: Array2::zeros((4, 4)),
            w_v: Array2::zeros((4, 4)),
        };
        let a = compute_head_attention(&seq(4, 5, 1), &head).unwrap();
        for i in 0..5 {
            for j in 0..=i {
                assert_abs_diff_eq!(a.weights()[[i, j]], 1.0 / (i + 1) as f64, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let head = HeadWeights {
            w_qk: random_matrix(3, 3, 2),
            w_v: Array2::zeros((3, 3)),
        };
        let a = compute_head_attention(&seq(3, 1, 4), &head).unwrap();
        assert_eq!(a.weights(), &array![[1.0]]);
    }

    /// Straight-line reference: explicit double loops, exp/normalise over the
    /// visible prefix only, no masking tricks.
    fn reference_attention(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
        let (d, t) = x.dim();
        let mut out = Array2::zeros((t, t));
        for i in 0..t {
            let mut s = vec![0.0; i + 1];
            for (j, sj) in s.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += x[[a, i]] * w[[a, b]] * x[[b, j]];
                    }
                }
                *sj = acc / (d as f64).sqrt();
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for j in 0..=i {
                out[[i, j]] = s[j].exp() / z;
            }
        }
        out
    }

    #[test]
    fn matches_dense_reference() {
        let x = seq(4, 6, 3);
        let head = HeadWeights {
            w_qk: random_matrix(4, 4, 33),
            w_v: Array2::zeros((4, 4)),
        };
        let a = compute_head_attention(&x, &head).unwrap();
        let r = reference_attention(x.embeddings(), &head.w_qk);
        for (p, q) in a.weights().iter().zip(r.iter()) {
            assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let head = HeadWeights {
            w_qk: Array2::zeros((3, 3)),
            w_v: Array2::zeros((3, 3)),
        };
        assert!(matches!(
            compute_head_attention(&seq(4, 2, 0), &head),
            Err(Error::Shape { .. })
        ));
    }
}
