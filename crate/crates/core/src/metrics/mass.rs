// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionMatrix, HeadId, Modality};
use crate::error::{Error, Result};

/// Attention mass received by each modality: the sum of that modality's
/// column masses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityMass {
    pub text: f64,
    pub visual: f64,
}

impl ModalityMass {
    pub fn get(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
        }
    }

    pub fn total(&self) -> f64 {
        self.text + self.visual
    }
}

pub fn modality_attention_mass(a: &AttentionMatrix, labels: &[Modality]) -> Result<ModalityMass> {
    if labels.len() != a.len() {
        return Err(Error::shape("modality labels", a.len(), labels.len()));
    }
    let mut mass = ModalityMass::default();
    for (m, col) in labels.iter().zip(a.column_masses()) {
        match m {
            Modality::Text => mass.text += col,
            Modality::Visual => mass.visual += col,
        }
    }
    Ok(mass)
}

/// Modality-wise attention imbalance `A_p / A_q`.
///
/// Values near 1 mean comparable attention; large values mean `p`
/// dominates; small positive values mean `q` dominates.
pub fn mai(mass: &ModalityMass, p: Modality, q: Modality) -> Result<f64> {
    let denom = mass.get(q);
    if denom <= 0.0 {
        return Err(Error::UndefinedMai);
    }
    Ok(mass.get(p) / denom)
}

/// Element-wise mean of equally sized attention matrices.
///
/// The result keeps the row-stochastic flag only if every input has it.
pub fn mean_attention(mats: &[&AttentionMatrix]) -> Result<AttentionMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InvalidArgument("no attention matrices to average".into()))?;
    let t = first.len();
    let mut acc = Array2::<f64>::zeros((t, t));
    for m in mats {
        if m.len() != t {
            return Err(Error::shape("averaged attention", t, m.len()));
        }
        acc += m.weights();
    }
    acc /= mats.len() as f64;
    let stochastic = mats.iter().all(|m| m.row_stochastic());
    Ok(AttentionMatrix::from_parts(acc, None, stochastic))
}

/// Mean over all heads of one layer from a layer-major attention set.
pub fn layer_mean_attention(attentions: &[AttentionMatrix], layer: usize) -> Result<AttentionMatrix> {
    let mats: Vec<&AttentionMatrix> = attentions
        .iter()
        .filter(|a| a.head().map(|h| h.layer) == Some(layer))
        .collect();
    if mats.is_empty() {
        return Err(Error::InvalidArgument(format!("no attention matrices for layer {layer}")));
    }
    mean_attention(&mats)
}

pub fn find_head(attentions: &[AttentionMatrix], head: HeadId) -> Result<&AttentionMatrix> {
    attentions
        .iter()
        .find(|a| a.head() == Some(head))
        .ok_or_else(|| Error::InvalidArgument(format!("no attention matrix for head {head}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::softmax_rows;
    use ndarray::array;

    fn uniform3() -> AttentionMatrix {
        softmax_rows(&Array2::zeros((3, 3)), true).unwrap()
    }

    #[test]
    fn hand_summed_masses() {
        let labels = [Modality::Visual, Modality::Text, Modality::Text];
        let m = modality_attention_mass(&uniform3(), &labels).unwrap();
        // column sums of the causal uniform matrix: 1 + 1/2 + 1/3, 1/2 + 1/3, 1/3
        let visual = 1.0 + 0.5 + 1.0 / 3.0;
        let text = (0.5 + 1.0 / 3.0) + 1.0 / 3.0;
        assert!((m.visual - visual).abs() < 1e-15);
        assert!((m.text - text).abs() < 1e-15);
        assert!((mai(&m, Modality::Visual, Modality::Text).unwrap() - 11.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_modality_and_zero_matrix() {
        let m = modality_attention_mass(&uniform3(), &[Modality::Text; 3]).unwrap();
        assert!((m.text - 3.0).abs() < 1e-12);
        assert_eq!(m.visual, 0.0);
        assert!(matches!(mai(&m, Modality::Text, Modality::Visual), Err(Error::UndefinedMai)));
        let z = AttentionMatrix::new(Array2::zeros((2, 2))).unwrap();
        let m = modality_attention_mass(&z, &[Modality::Text, Modality::Visual]).unwrap();
        assert_eq!(m.total(), 0.0);
    }

    #[test]
    fn equal_masses_give_one() {
        let a = AttentionMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = modality_attention_mass(&a, &[Modality::Text, Modality::Visual]).unwrap();
        assert_eq!(mai(&m, Modality::Text, Modality::Visual).unwrap(), 1.0);
    }

    #[test]
    fn label_mismatch_rejected() {
        assert!(matches!(
            modality_attention_mass(&uniform3(), &[Modality::Text]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn layer_mean_averages_heads() {
        let a = AttentionMatrix::new(array![[1.0, 0.0], [1.0, 0.0]]).unwrap().with_head(HeadId::new(1, 0));
        let b = AttentionMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap().with_head(HeadId::new(1, 1));
        let c = AttentionMatrix::new(array![[1.0, 0.0], [0.5, 0.5]]).unwrap().with_head(HeadId::new(0, 0));
        let m = layer_mean_attention(&[c, a, b], 1).unwrap();
        assert_eq!(m.weights(), &array![[1.0, 0.0], [0.5, 0.5]]);
        assert!(m.row_stochastic());
    }
}
