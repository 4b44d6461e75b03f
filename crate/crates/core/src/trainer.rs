//! Next-item-prediction training over segmented layouts. Expert slots never
//! contribute to the loss.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgen::{causal_mask, loss_mask, segmented_mask, AttentionMask, LossMask};
use crate::seqcore::{SegmentationPlan, TokenLayout};
use crate::tinyformer::{loss_and_grads, Model, ModelError, Params};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("NonFiniteGradient: gradient contains NaN or infinity")]
    NonFiniteGradient,
    #[error("EmptyDataset: no sequence has at least two items")]
    EmptyDataset,
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Train with a plain causal mask instead of the segmented one.
    pub causal_baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.1,
            batch_size: 32,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            causal_baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(TrainError::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Params,
    v: Params,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        AdamState {
            m: Params::zeros(&model.config),
            v: Params::zeros(&model.config),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Adam with decoupled weight decay.
pub fn adam_step(
    model: &mut Model,
    grads: &Params,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = cfg.learning_rate;
    for (((p, g), m), v) in model
        .params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

impl TrainStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,seconds,tokens_per_sec\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.3},{:.1}\n",
                e.epoch, e.mean_loss, e.seconds, e.tokens_per_sec
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

/// Layout, attention mask and loss mask for one plan.
pub struct PreparedPlan {
    pub plan: SegmentationPlan,
    pub layout: TokenLayout,
    pub mask: AttentionMask,
    pub lmask: LossMask,
}

impl PreparedPlan {
    pub fn new(plan: &SegmentationPlan, causal: bool) -> Self {
        let layout = TokenLayout::from_plan(plan);
        let mask = if causal {
            causal_mask(plan.flat_len())
        } else {
            segmented_mask(plan)
        };
        PreparedPlan {
            plan: plan.clone(),
            lmask: loss_mask(&layout),
            layout,
            mask,
        }
    }
}

/// Training examples: sequences at least as long as the plan use its last
/// `total_items` events; shorter ones (cold start) fall back to a single
/// segment without experts.
fn training_examples<'a>(
    sequences: &'a [Vec<u32>],
    plan: &SegmentationPlan,
) -> Vec<(&'a [u32], usize)> {
    let total = plan.total_items();
    sequences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            if s.len() >= total {
                (&s[s.len() - total..], total)
            } else {
                (&s[..], s.len())
            }
        })
        .collect()
}

pub fn train(
    mut model: Model,
    sequences: &[Vec<u32>],
    plan: &SegmentationPlan,
    cfg: &TrainConfig,
) -> Result<(Model, TrainStats), TrainError> {
    cfg.validate()?;
    let examples = training_examples(sequences, plan);
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut prepared: BTreeMap<usize, PreparedPlan> = BTreeMap::new();
    for &(_, len) in &examples {
        prepared.entry(len).or_insert_with(|| {
            if len == plan.total_items() {
                PreparedPlan::new(plan, cfg.causal_baseline)
            } else {
                PreparedPlan::new(&SegmentationPlan::single(len).expect("len >= 2"), true)
            }
        });
    }

    let mut state = AdamState::new(&model);
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Params), ModelError>> = batch
                .par_iter()
                .map(|&u| {
                    let (seq, len) = examples[u];
                    let pp = &prepared[&len];
                    loss_and_grads(&model, &pp.layout, seq, &pp.mask, &pp.lmask)
                })
                .collect();
            let mut total = Params::zeros(&model.config);
            for (r, &u) in results.into_iter().zip(batch) {
                let (loss, g) = r?;
                loss_sum += loss;
                tokens += prepared[&examples[u].1].layout.len();
                total.add_assign(&g);
            }
            total.scale(1.0 / batch.len() as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = total.global_norm();
                if norm > clip {
                    total.scale(clip / norm);
                }
            }
            adam_step(&mut model, &total, &mut state, cfg)?;
        }
        let seconds = started.elapsed().as_secs_f64();
        let mean_loss = loss_sum / examples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        stats.epochs.push(EpochStats {
            epoch,
            mean_loss,
            seconds,
            tokens_per_sec: tokens as f64 / seconds.max(1e-9),
        });
    }
    Ok((model, stats))
}
