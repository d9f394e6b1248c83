// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modality tag of a token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Visual];

    /// Row of the model's modality-embedding table.
    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Visual => 'v',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            't' | 'T' => Some(Modality::Text),
            'v' | 'V' => Some(Modality::Visual),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("text"),
            Modality::Visual => f.write_str("visual"),
        }
    }
}

/// Embedded tokens (one column per position) with per-position modality tags.
///
/// Visual positions carry no vocabulary id; text positions usually do.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    embeddings: Array2<f64>,
    modalities: Vec<Modality>,
    token_ids: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn new(
        embeddings: Array2<f64>,
        modalities: Vec<Modality>,
        token_ids: Vec<Option<usize>>,
    ) -> Result<Self> {
        let (d, t) = embeddings.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        if modalities.len() != t {
            return Err(Error::shape("modality labels", t, modalities.len()));
        }
        if token_ids.len() != t {
            return Err(Error::shape("token ids", t, token_ids.len()));
        }
        Ok(Self {
            embeddings,
            modalities,
            token_ids,
        })
    }

    /// A sequence with no positions yet, ready for [`TokenSequence::push`].
    pub fn empty(d: usize) -> Self {
        Self {
            embeddings: Array2::zeros((d, 0)),
            modalities: Vec::new(),
            token_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.nrows()
    }

    /// `d × T` embedding matrix.
    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn token_ids(&self) -> &[Option<usize>] {
        &self.token_ids
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.embeddings.column(j)
    }

    pub fn push(
        &mut self,
        embedding: ArrayView1<'_, f64>,
        modality: Modality,
        token_id: Option<usize>,
    ) -> Result<()> {
        if embedding.len() != self.dim() {
            return Err(Error::shape("pushed embedding", self.dim(), embedding.len()));
        }
        let col = embedding.to_owned().insert_axis(Axis(1));
        self.embeddings = concatenate![Axis(1), self.embeddings, col];
        self.modalities.push(modality);
        self.token_ids.push(token_id);
        Ok(())
    }

    /// First `n` positions.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            embeddings: self.embeddings.slice(ndarray::s![.., ..n]).to_owned(),
            modalities: self.modalities[..n].to_vec(),
            token_ids: self.token_ids[..n].to_vec(),
        }
    }

    /// The sequence with position `j` removed.
    ///
    /// The model has no positional signal, so removal is the same
    /// counterfactual as masking the token's row and column in every score
    /// matrix.
    pub fn without(&self, j: usize) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| k != j).collect();
        Self {
            embeddings: self.embeddings.select(Axis(1), &keep),
            modalities: keep.iter().map(|&k| self.modalities[k]).collect(),
            token_ids: keep.iter().map(|&k| self.token_ids[k]).collect(),
        }
    }

    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        self.modalities
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == modality)
            .map(|(i, _)| i)
            .collect()
    }

    /// Mean embedding over the positions of one modality, if any exist.
    pub fn mean_embedding(&self, modality: Modality) -> Option<Array1<f64>> {
        let idx = self.indices_of(modality);
        if idx.is_empty() {
            return None;
        }
        self.embeddings.select(Axis(1), &idx).mean_axis(Axis(1))
    }
}

/// Compact `t`/`v` string of a label sequence, used in CSV metadata lines.
pub fn modality_string(labels: &[Modality]) -> String {
    labels.iter().map(|m| m.as_char()).collect()
}

pub fn parse_modality_string(s: &str) -> Option<Vec<Modality>> {
    s.chars().map(Modality::from_char).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_label_length_mismatch() {
        let e = array![[1.0, 2.0], [3.0, 4.0]];
        let err = TokenSequence::new(e, vec![Modality::Text], vec![None, None]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn without_removes_one_column() {
        let e = array![[1.0, 2.0, 3.0]];
        let seq = TokenSequence::new(
            e,
            vec![Modality::Visual, Modality::Text, Modality::Text],
            vec![None, Some(4), Some(5)],
        )
        .unwrap();
        let cut = seq.without(1);
        assert_eq!(cut.embeddings(), &array![[1.0, 3.0]]);
        assert_eq!(cut.modalities(), &[Modality::Visual, Modality::Text]);
        assert_eq!(cut.token_ids(), &[None, Some(5)]);
    }

    #[test]
    fn push_grows_sequence() {
        let mut seq = TokenSequence::empty(2);
        seq.push(array![1.0, 2.0].view(), Modality::Text, Some(3))
            .unwrap();
        seq.push(array![0.5, 0.5].view(), Modality::Visual, None)
            .unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.indices_of(Modality::Visual), vec![1]);
        assert!(seq.push(array![1.0].view(), Modality::Text, None).is_err());
    }

    #[test]
    fn modality_string_round_trips() {
        let labels = vec![Modality::Visual, Modality::Text, Modality::Visual];
        let s = modality_string(&labels);
        assert_eq!(s, "vtv");
        assert_eq!(parse_modality_string(&s).unwrap(), labels);
        assert!(parse_modality_string("vx").is_none());
    }
}
