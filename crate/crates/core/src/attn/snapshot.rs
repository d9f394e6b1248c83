// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON snapshots of models and token sequences, and CSV matrix export.
//!
//! Matrices are stored as `{"rows": r, "cols": c, "data": [...]}` with `data`
//! in row-major order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attn::{HeadWeights, LayerWeights, Modality, ModelConfig, TinyModel, TokenSequence};
use crate::error::{Error, Result};

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_array(m: &Array2<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::shape(
                "matrix snapshot",
                self.rows * self.cols,
                self.data.len(),
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSnapshot {
    pub w_qk: MatrixJson,
    pub w_v: MatrixJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub heads: Vec<HeadSnapshot>,
    pub w_f1: MatrixJson,
    pub w_f2: MatrixJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub layers: Vec<LayerSnapshot>,
    pub readout: MatrixJson,
    pub embedding_table: MatrixJson,
    pub modality_embedding: MatrixJson,
}

impl ModelSnapshot {
    pub fn from_model(model: &TinyModel) -> Self {
        Self {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            config: model.config.clone(),
            layers: model
                .layers
                .iter()
                .map(|l| LayerSnapshot {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadSnapshot {
                            w_qk: MatrixJson::from_array(&h.w_qk),
                            w_v: MatrixJson::from_array(&h.w_v),
                        })
                        .collect(),
                    w_f1: MatrixJson::from_array(&l.w_f1),
                    w_f2: MatrixJson::from_array(&l.w_f2),
                })
                .collect(),
            readout: MatrixJson::from_array(&model.readout),
            embedding_table: MatrixJson::from_array(&model.embedding_table),
            modality_embedding: MatrixJson::from_array(&model.modality_embedding),
        }
    }

    /// Rebuilds the model, checking every shape against the config.
    pub fn into_model(self) -> Result<TinyModel> {
        let cfg = self.config;
        cfg.validate()?;
        let d = cfg.d;
        let expect = |m: &MatrixJson, shape: (usize, usize), what: &'static str| -> Result<Array2<f64>> {
            let a = m.to_array()?;
            if a.dim() != shape {
                return Err(Error::shape(what, format!("{shape:?}"), format!("{:?}", a.dim())));
            }
            Ok(a)
        };
        if self.layers.len() != cfg.layers {
            return Err(Error::shape("snapshot layers", cfg.layers, self.layers.len()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in &self.layers {
            if l.heads.len() != cfg.heads {
                return Err(Error::shape("snapshot heads", cfg.heads, l.heads.len()));
            }
            let heads = l
                .heads
                .iter()
                .map(|h| {
                    Ok(HeadWeights {
                        w_qk: expect(&h.w_qk, (d, d), "w_qk")?,
                        w_v: expect(&h.w_v, (cfg.head_dim(), d), "w_v")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerWeights {
                heads,
                w_f1: expect(&l.w_f1, (d, d), "w_f1")?,
                w_f2: expect(&l.w_f2, (d, d), "w_f2")?,
                activation: cfg.activation,
            });
        }
        Ok(TinyModel {
            readout: expect(&self.readout, (d, cfg.vocab), "readout")?,
            embedding_table: expect(&self.embedding_table, (cfg.vocab, d), "embedding_table")?,
            modality_embedding: expect(
                &self.modality_embedding,
                (Modality::ALL.len(), d),
                "modality_embedding",
            )?,
            layers,
            config: cfg,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSnapshot {
    pub schema_version: u32,
    pub d: usize,
    pub t: usize,
    /// `d × T`, one column per token.
    pub embeddings: MatrixJson,
    pub modalities: Vec<Modality>,
    pub token_ids: Vec<Option<usize>>,
}

impl SequenceSnapshot {
    pub fn from_sequence(x: &TokenSequence) -> Self {
        Self {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            d: x.dim(),
            t: x.len(),
            embeddings: MatrixJson::from_array(x.embeddings()),
            modalities: x.modalities().to_vec(),
            token_ids: x.token_ids().to_vec(),
        }
    }

    pub fn into_sequence(self) -> Result<TokenSequence> {
        let emb = self.embeddings.to_array()?;
        if emb.dim() != (self.d, self.t) {
            return Err(Error::shape(
                "sequence embeddings",
                format!("({}, {})", self.d, self.t),
                format!("{:?}", emb.dim()),
            ));
        }
        TokenSequence::new(emb, self.modalities, self.token_ids)
    }
}

/// One CSV line per matrix row, values in shortest round-trip form.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`matrix_to_csv`] output. Lines starting with `#` and blank lines
/// are skipped.
pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad CSV value {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => return Err(Error::shape("CSV row", c, vals.len())),
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::InvalidArgument(format!("CSV matrix: {e}")))
}
