//! A small pre-norm decoder-only transformer with hand-written backprop.
//!
//! Inputs at each flattened slot are either an item embedding or one of the
//! shared learnable expert embeddings, plus a learned absolute position
//! embedding. The output head is tied to the item embeddings.

mod backward;
mod checkpoint;
mod forward;

pub use backward::loss_and_grads;
pub use checkpoint::{model_fingerprint, read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use forward::{
    forward, forward_counted, forward_with_cache, forward_with_cache_counted, FlopCounter,
    ForwardTrace, LayerKv, Token,
};
pub(crate) use forward::{run, Attend, LogitRows};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("VocabOverflow: item id {item} >= vocab size {vocab}")]
    VocabOverflow { item: u32, vocab: usize },
    #[error("NoIncludedSlots: the loss mask excludes every slot")]
    NoIncludedSlots,
    #[error("CacheLayerMismatch: cache has {got} layers, model has {expected}")]
    CacheLayerMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Number of learnable expert embeddings (global expert slots).
    pub num_expert_slots: usize,
    pub seed: u32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        let too_big = [
            self.num_layers,
            self.model_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_positions,
            self.num_expert_slots,
        ]
        .iter()
        .any(|&v| v > u32::MAX as usize);
        if too_big {
            return Err(ModelError::InvalidConfig("dimension exceeds u32".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.model_dim;
        let per_layer = 4 * d * d + 2 * d * self.ffn_dim + 2 * d;
        (self.vocab_size + self.num_expert_slots + self.max_positions) * d
            + self.num_layers * per_layer
            + d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    /// `d x ffn`
    pub w1: Array2<f64>,
    /// `ffn x d`
    pub w2: Array2<f64>,
    pub attn_norm: Array1<f64>,
    pub ffn_norm: Array1<f64>,
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub item_embeddings: Array2<f64>,
    pub expert_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
}

/// Names of the parameter families, in the order [`Params::family_tensors`] yields them.
pub const PARAM_FAMILIES: [&str; 12] = [
    "item_embeddings",
    "expert_embeddings",
    "position_embeddings",
    "wq",
    "wk",
    "wv",
    "wo",
    "w1",
    "w2",
    "attn_norm",
    "ffn_norm",
    "final_norm",
];

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        let f = config.ffn_dim;
        let layer = || LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            w1: Array2::zeros((d, f)),
            w2: Array2::zeros((f, d)),
            attn_norm: Array1::zeros(d),
            ffn_norm: Array1::zeros(d),
        };
        Params {
            item_embeddings: Array2::zeros((config.vocab_size, d)),
            expert_embeddings: Array2::zeros((config.num_expert_slots, d)),
            position_embeddings: Array2::zeros((config.max_positions, d)),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            final_norm: Array1::zeros(d),
        }
    }

    /// Flat views of every tensor in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.item_embeddings.as_slice().unwrap(),
            self.expert_embeddings.as_slice().unwrap(),
            self.position_embeddings.as_slice().unwrap(),
        ];
        for l in &self.layers {
            out.extend([
                l.wq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.w1.as_slice().unwrap(),
                l.w2.as_slice().unwrap(),
                l.attn_norm.as_slice().unwrap(),
                l.ffn_norm.as_slice().unwrap(),
            ]);
        }
        out.push(self.final_norm.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.item_embeddings.as_slice_mut().unwrap(),
            self.expert_embeddings.as_slice_mut().unwrap(),
            self.position_embeddings.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.wq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.attn_norm.as_slice_mut().unwrap(),
                l.ffn_norm.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.final_norm.as_slice_mut().unwrap());
        out
    }

    /// Tensors grouped by family (per-layer tensors of one family collected together).
    pub fn family_tensors(&self) -> Vec<(&'static str, Vec<&[f64]>)> {
        let per_layer = |f: fn(&LayerParams) -> &[f64]| -> Vec<&[f64]> {
            self.layers.iter().map(f).collect()
        };
        vec![
            ("item_embeddings", vec![self.item_embeddings.as_slice().unwrap()]),
            ("expert_embeddings", vec![self.expert_embeddings.as_slice().unwrap()]),
            ("position_embeddings", vec![self.position_embeddings.as_slice().unwrap()]),
            ("wq", per_layer(|l| l.wq.as_slice().unwrap())),
            ("wk", per_layer(|l| l.wk.as_slice().unwrap())),
            ("wv", per_layer(|l| l.wv.as_slice().unwrap())),
            ("wo", per_layer(|l| l.wo.as_slice().unwrap())),
            ("w1", per_layer(|l| l.w1.as_slice().unwrap())),
            ("w2", per_layer(|l| l.w2.as_slice().unwrap())),
            ("attn_norm", per_layer(|l| l.attn_norm.as_slice().unwrap())),
            ("ffn_norm", per_layer(|l| l.ffn_norm.as_slice().unwrap())),
            ("final_norm", vec![self.final_norm.as_slice().unwrap()]),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }
}

pub fn init_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let d = config.model_dim as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(config.seed));
    let mut params = Params::zeros(config);
    let mut fill = |t: &mut [f64], std: f64| {
        let normal = Normal::new(0.0, std).expect("finite std");
        t.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    };
    let inv_sqrt_d = 1.0 / d.sqrt();
    let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
    fill(params.item_embeddings.as_slice_mut().unwrap(), inv_sqrt_d);
    fill(params.expert_embeddings.as_slice_mut().unwrap(), inv_sqrt_d);
    fill(params.position_embeddings.as_slice_mut().unwrap(), 0.1 * inv_sqrt_d);
    for l in &mut params.layers {
        fill(l.wq.as_slice_mut().unwrap(), inv_sqrt_d);
        fill(l.wk.as_slice_mut().unwrap(), inv_sqrt_d);
        fill(l.wv.as_slice_mut().unwrap(), inv_sqrt_d);
        fill(l.wo.as_slice_mut().unwrap(), inv_sqrt_d * residual_scale);
        fill(l.w1.as_slice_mut().unwrap(), inv_sqrt_d);
        fill(
            l.w2.as_slice_mut().unwrap(),
            residual_scale / (config.ffn_dim as f64).sqrt(),
        );
        l.attn_norm.fill(1.0);
        l.ffn_norm.fill(1.0);
    }
    params.final_norm.fill(1.0);
    Ok(Model {
        config: config.clone(),
        params,
    })
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    pub fn small_config(vocab: usize, max_positions: usize, experts: usize, seed: u32) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            vocab_size: vocab,
            max_positions,
            num_expert_slots: experts,
            seed,
        }
    }

    /// Random model with non-trivial norm gains so their gradients are exercised.
    pub fn random_model(config: &ModelConfig) -> Model {
        use rand::Rng;
        let mut model = init_model(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(config.seed) + 99);
        for l in &mut model.params.layers {
            l.attn_norm.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            l.ffn_norm.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        }
        model.params.final_norm.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        model
            .params
            .position_embeddings
            .iter_mut()
            .for_each(|p| *p *= 5.0);
        model
    }
}
