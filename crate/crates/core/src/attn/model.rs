// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attn::{HeadId, Modality};
use crate::error::{Error, Result};

/// Element-wise feed-forward activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // tanh approximation
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// Hyperparameters of a [`TinyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width `d`; must be divisible by `heads`.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seed: u64,
    pub layer_norm: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 6,
            heads: 4,
            vocab: 64,
            seed: 7,
            layer_norm: true,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.vocab == 0 {
            return Err(Error::Config(
                "model d, layers, heads and vocab must all be >= 1".into(),
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }
}

/// Per-head parameters.
///
/// `w_qk` is the fused `d × d` query-key product. `w_v` projects the full
/// hidden state onto this head's `d/H` slice of the concatenated output.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub w_qk: Array2<f64>,
    pub w_v: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub w_f1: Array2<f64>,
    pub w_f2: Array2<f64>,
    pub activation: Activation,
}

/// An `L`-layer, `H`-head causal transformer with a linear readout.
///
/// Weights are i.i.d. Gaussian with standard deviation `1/sqrt(d)`; token and
/// modality embeddings have unit-variance entries so that hidden states enter
/// the first layer at the same scale layer normalisation produces later.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// `d × V`: logits are `readout^T h`.
    pub readout: Array2<f64>,
    /// `V × d`.
    pub embedding_table: Array2<f64>,
    /// One row per [`Modality`], added to every token of that modality.
    pub modality_embedding: Array2<f64>,
}

impl TinyModel {
    /// Builds a model deterministically from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let dh = config.head_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let scaled = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut draw = |shape: (usize, usize), dist: &Normal<f64>| {
            Array2::from_shape_simple_fn(shape, || dist.sample(&mut rng))
        };

        let modality_embedding = draw((Modality::ALL.len(), d), &unit);
        let embedding_table = draw((config.vocab, d), &unit);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let heads = (0..config.heads)
                .map(|_| HeadWeights {
                    w_qk: draw((d, d), &scaled),
                    w_v: draw((dh, d), &scaled),
                })
                .collect();
            let w_f1 = draw((d, d), &scaled);
            let w_f2 = draw((d, d), &scaled);
            layers.push(LayerWeights {
                heads,
                w_f1,
                w_f2,
                activation: config.activation,
            });
        }
        let readout = draw((d, config.vocab), &scaled);
        Ok(Self {
            config,
            layers,
            readout,
            embedding_table,
            modality_embedding,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn check_head(&self, id: HeadId) -> Result<()> {
        if id.layer < self.config.layers && id.head < self.config.heads {
            Ok(())
        } else {
            Err(Error::InvalidHead {
                head: id,
                layers: self.config.layers,
                heads: self.config.heads,
            })
        }
    }

    pub fn head(&self, id: HeadId) -> Result<&HeadWeights> {
        self.check_head(id)?;
        Ok(&self.layers[id.layer].heads[id.head])
    }

    pub fn head_mut(&mut self, id: HeadId) -> Result<&mut HeadWeights> {
        self.check_head(id)?;
        Ok(&mut self.layers[id.layer].heads[id.head])
    }

    /// All head ids in layer-major order.
    pub fn head_ids(&self) -> Vec<HeadId> {
        (0..self.config.layers)
            .flat_map(|l| (0..self.config.heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    /// Rows of the concatenated attention output written by `head`.
    pub fn head_slice(&self, head: usize) -> std::ops::Range<usize> {
        let dh = self.config.head_dim();
        head * dh..(head + 1) * dh
    }

    /// Input embedding of a text token: table row plus the text modality row.
    pub fn embed_text(&self, token: usize) -> Result<Array1<f64>> {
        if token >= self.vocab() {
            return Err(Error::InvalidArgument(format!(
                "token id {token} outside vocabulary of {}",
                self.vocab()
            )));
        }
        Ok(&self.embedding_table.row(token) + &self.modality_row(Modality::Text))
    }

    pub fn modality_row(&self, m: Modality) -> ArrayView1<'_, f64> {
        self.modality_embedding.row(m.index())
    }

    /// Logits `readout^T h` for one hidden column.
    pub fn logits(&self, hidden: ArrayView1<'_, f64>) -> Array1<f64> {
        self.readout.t().dot(&hidden)
    }

    /// Erases the value path of a head in place (used to build crafted models).
    pub fn zero_value(&mut self, id: HeadId) -> Result<()> {
        self.head_mut(id)?.w_v.fill(0.0);
        Ok(())
    }

    /// Writes `weights` into the value projection block for `id`.
    pub fn set_value(&mut self, id: HeadId, weights: Array2<f64>) -> Result<()> {
        let head = self.head_mut(id)?;
        if head.w_v.dim() != weights.dim() {
            return Err(Error::shape(
                "value matrix",
                format!("{:?}", head.w_v.dim()),
                format!("{:?}", weights.dim()),
            ));
        }
        head.w_v.assign(&weights.slice(s![.., ..]));
        Ok(())
    }
}
