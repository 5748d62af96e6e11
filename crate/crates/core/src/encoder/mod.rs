//! Causal transformer encoder: maps an item prefix to a sequence embedding
//! and scores the catalog by inner product, with exact reverse-mode gradients
//! for every parameter tensor.
//!
//! The architecture follows the self-attentive recommender lineage: learned
//! item + positional embeddings, stacked blocks of causal multi-head
//! self-attention and a pointwise feed-forward (hidden width = embedding
//! width), post-sublayer residual + layer norm, and the final-position state
//! as the sequence representation. All math is 64-bit.

mod checkpoint;
mod forward;

pub use checkpoint::Checkpoint;
pub use forward::{backward, encode, encode_train, DropoutCtx, ForwardCache};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{next_gaussian, stream, Purpose};
use crate::ItemId;

/// Architecture hyperparameters. `num_items` excludes the padding id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: u32,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.max_len < 2 {
            return Err(crate::Error::Config(
                "dim, layers, heads must be positive and max_len >= 2".into(),
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(crate::Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::Error::Config(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.num_items == 0 {
            return Err(crate::Error::Config("catalog is empty".into()));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn_query: Array2<f64>,
    pub attn_key: Array2<f64>,
    pub attn_value: Array2<f64>,
    pub attn_output: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl BlockParams {
    fn zeros(dim: usize) -> BlockParams {
        BlockParams {
            attn_query: Array2::zeros((dim, dim)),
            attn_key: Array2::zeros((dim, dim)),
            attn_value: Array2::zeros((dim, dim)),
            attn_output: Array2::zeros((dim, dim)),
            ln1_gain: Array1::zeros(dim),
            ln1_bias: Array1::zeros(dim),
            ffn_w1: Array2::zeros((dim, dim)),
            ffn_b1: Array1::zeros(dim),
            ffn_w2: Array2::zeros((dim, dim)),
            ffn_b2: Array1::zeros(dim),
            ln2_gain: Array1::zeros(dim),
            ln2_bias: Array1::zeros(dim),
        }
    }
}

/// All learnable tensors. Row 0 of `item_embeddings` is the padding row and
/// stays identically zero: it is never gathered in the forward pass, so no
/// gradient or decay ever touches it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub item_embeddings: Array2<f64>,
    pub positions: Array2<f64>,
    pub blocks: Vec<BlockParams>,
}

impl Parameters {
    /// Seeded Gaussian initialization (std 1/sqrt(D)) for embeddings and
    /// projection matrices; layer norms start at identity, biases at zero.
    ///
    /// Draw order is fixed (embeddings, positions, then per block
    /// query/key/value/output/ffn_w1/ffn_w2) so a given seed always produces
    /// the same model.
    pub fn init(config: ModelConfig, seed: u64) -> Parameters {
        let dim = config.dim;
        let std = 1.0 / (dim as f64).sqrt();
        let mut rng = stream(seed, Purpose::Init, &[]);
        let draw = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| next_gaussian(rng) * std)
        };

        let mut item_embeddings = draw(&mut rng, config.num_items as usize + 1, dim);
        item_embeddings.row_mut(0).fill(0.0);
        let positions = draw(&mut rng, config.max_len, dim);

        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                attn_query: draw(&mut rng, dim, dim),
                attn_key: draw(&mut rng, dim, dim),
                attn_value: draw(&mut rng, dim, dim),
                attn_output: draw(&mut rng, dim, dim),
                ln1_gain: Array1::ones(dim),
                ln1_bias: Array1::zeros(dim),
                ffn_w1: draw(&mut rng, dim, dim),
                ffn_b1: Array1::zeros(dim),
                ffn_w2: draw(&mut rng, dim, dim),
                ffn_b2: Array1::zeros(dim),
                ln2_gain: Array1::ones(dim),
                ln2_bias: Array1::zeros(dim),
            })
            .collect();

        Parameters {
            config,
            item_embeddings,
            positions,
            blocks,
        }
    }

    /// Same shapes, all zeros. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            config: self.config.clone(),
            item_embeddings: Array2::zeros(self.item_embeddings.dim()),
            positions: Array2::zeros(self.positions.dim()),
            blocks: self.blocks.iter().map(|_| BlockParams::zeros(self.config.dim)).collect(),
        }
    }

    /// Named views of every tensor, in a fixed order shared with
    /// [`Parameters::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("item_embeddings".into(), slice(&self.item_embeddings)),
            ("positions".into(), slice(&self.positions)),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.attn_query"), slice(&b.attn_query)));
            out.push((format!("block{l}.attn_key"), slice(&b.attn_key)));
            out.push((format!("block{l}.attn_value"), slice(&b.attn_value)));
            out.push((format!("block{l}.attn_output"), slice(&b.attn_output)));
            out.push((format!("block{l}.ln1_gain"), slice1(&b.ln1_gain)));
            out.push((format!("block{l}.ln1_bias"), slice1(&b.ln1_bias)));
            out.push((format!("block{l}.ffn_w1"), slice(&b.ffn_w1)));
            out.push((format!("block{l}.ffn_b1"), slice1(&b.ffn_b1)));
            out.push((format!("block{l}.ffn_w2"), slice(&b.ffn_w2)));
            out.push((format!("block{l}.ffn_b2"), slice1(&b.ffn_b2)));
            out.push((format!("block{l}.ln2_gain"), slice1(&b.ln2_gain)));
            out.push((format!("block{l}.ln2_bias"), slice1(&b.ln2_bias)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            (
                "item_embeddings".into(),
                slice_mut(&mut self.item_embeddings),
            ),
            ("positions".into(), slice_mut(&mut self.positions)),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.attn_query"), slice_mut(&mut b.attn_query)));
            out.push((format!("block{l}.attn_key"), slice_mut(&mut b.attn_key)));
            out.push((format!("block{l}.attn_value"), slice_mut(&mut b.attn_value)));
            out.push((format!("block{l}.attn_output"), slice_mut(&mut b.attn_output)));
            out.push((format!("block{l}.ln1_gain"), slice1_mut(&mut b.ln1_gain)));
            out.push((format!("block{l}.ln1_bias"), slice1_mut(&mut b.ln1_bias)));
            out.push((format!("block{l}.ffn_w1"), slice_mut(&mut b.ffn_w1)));
            out.push((format!("block{l}.ffn_b1"), slice1_mut(&mut b.ffn_b1)));
            out.push((format!("block{l}.ffn_w2"), slice_mut(&mut b.ffn_w2)));
            out.push((format!("block{l}.ffn_b2"), slice1_mut(&mut b.ffn_b2)));
            out.push((format!("block{l}.ln2_gain"), slice1_mut(&mut b.ln2_gain)));
            out.push((format!("block{l}.ln2_bias"), slice1_mut(&mut b.ln2_bias)));
        }
        out
    }

    /// self += other, tensor by tensor.
    pub fn add_assign(&mut self, other: &Parameters) {
        let theirs = other.tensors();
        for ((_, mine), (_, them)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(them) {
                *a += b;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    /// True when every tensor entry is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// The encoder's final-position representation of a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEmbedding {
    pub vector: Array1<f64>,
}

impl SequenceEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        self.vector.as_slice().expect("standard layout")
    }
}

/// One score per catalog item (padding excluded); `scores[i - 1]` belongs to
/// item id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn score(&self, item: ItemId) -> f64 {
        self.scores[(item - 1) as usize]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }
}

/// scores[i] = e_i . z for every non-padding item i.
pub fn score_all(params: &Parameters, z: &SequenceEmbedding) -> ScoreVector {
    let catalog = params.item_embeddings.slice(ndarray::s![1.., ..]);
    let scores = catalog.dot(&z.vector);
    ScoreVector {
        scores: scores.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            num_items: 20,
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 10,
            dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_and_padding_row_zero() {
        let a = Parameters::init(toy_config(), 42);
        let b = Parameters::init(toy_config(), 42);
        assert_eq!(a, b);
        assert!(a.item_embeddings.row(0).iter().all(|&v| v == 0.0));
        let c = Parameters::init(toy_config(), 43);
        assert_ne!(a, c);
    }

    #[test]
    fn tensor_iteration_orders_match() {
        let mut p = Parameters::init(toy_config(), 1);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = p.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names.len(), 2 + 12 * 2);
    }

    #[test]
    fn add_assign_accumulates() {
        let p = Parameters::init(toy_config(), 1);
        let mut acc = p.zeros_like();
        acc.add_assign(&p);
        acc.add_assign(&p);
        let doubled: Vec<f64> = p.tensors().iter().flat_map(|(_, s)| s.iter().map(|v| 2.0 * v)).collect();
        let got: Vec<f64> = acc.tensors().iter().flat_map(|(_, s)| s.iter().copied()).collect();
        assert_eq!(doubled, got);
    }

    #[test]
    fn score_all_matches_per_item_dots() {
        let params = Parameters::init(toy_config(), 7);
        let z = SequenceEmbedding {
            vector: Array1::from_shape_fn(8, |i| (i as f64 - 3.0) * 0.25),
        };
        let scores = score_all(&params, &z);
        assert_eq!(scores.scores.len(), 20);
        for item in 1..=20u32 {
            let manual: f64 = params
                .item_embeddings
                .row(item as usize)
                .iter()
                .zip(z.vector.iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((scores.score(item) - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn score_all_zero_embedding_gives_zero() {
        let params = Parameters::init(toy_config(), 7);
        let z = SequenceEmbedding {
            vector: Array1::zeros(8),
        };
        assert!(score_all(&params, &z).scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn score_all_basis_projection() {
        let mut params = Parameters::init(toy_config(), 7);
        // e_3 = unit basis vector along dim 5 -> score(3) = z[5].
        params.item_embeddings.row_mut(3).fill(0.0);
        params.item_embeddings[[3, 5]] = 1.0;
        let z = SequenceEmbedding {
            vector: Array1::from_shape_fn(8, |i| i as f64 * 0.1 + 0.05),
        };
        let scores = score_all(&params, &z);
        assert!((scores.score(3) - z.vector[5]).abs() < 1e-15);
    }

    #[test]
    fn config_validation_catches_bad_heads() {
        let mut c = toy_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(toy_config().validate().is_ok());
    }
}
