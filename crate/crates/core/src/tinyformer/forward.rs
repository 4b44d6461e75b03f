use ndarray::{s, Array2, Axis};

use super::{Model, ModelError, NORM_EPS};
use crate::maskgen::AttentionMask;
use crate::seqcore::{Slot, TokenLayout};

/// Input token at a flattened slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Item(u32),
    /// Global expert slot index.
    Expert(usize),
}

impl Token {
    /// Items of one segment followed by its expert slots.
    pub fn segment(items: &[u32], expert_slots: &[usize]) -> Vec<Token> {
        items
            .iter()
            .map(|&i| Token::Item(i))
            .chain(expert_slots.iter().map(|&g| Token::Expert(g)))
            .collect()
    }

    pub fn from_layout(layout: &TokenLayout, item_ids: &[u32]) -> Vec<Token> {
        let mut next = 0;
        layout
            .slots
            .iter()
            .map(|s| match *s {
                Slot::Item { .. } => {
                    next += 1;
                    Token::Item(item_ids[next - 1])
                }
                Slot::Expert { global, .. } => Token::Expert(global),
            })
            .collect()
    }
}

/// Key and value rows (all heads concatenated) for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl LayerKv {
    pub fn empty(d: usize) -> Self {
        LayerKv {
            keys: Array2::zeros((0, d)),
            values: Array2::zeros((0, d)),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&mut self, other: &LayerKv) {
        self.keys.append(Axis(0), other.keys.view()).expect("same width");
        self.values.append(Axis(0), other.values.view()).expect("same width");
    }
}

/// Multiply-accumulate tally for one or more forward passes. Attention
/// covers the score and weighted-sum products; linear covers the Q/K/V/O
/// projections and the FFN. Normalization, softmax, embeddings and the
/// vocabulary head are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub attention_macs: u64,
    pub linear_macs: u64,
}

impl FlopCounter {
    pub const ENABLED: bool = cfg!(feature = "flop-counter");

    #[inline]
    fn add_attention(&mut self, _macs: u64) {
        #[cfg(feature = "flop-counter")]
        {
            self.attention_macs += _macs;
        }
    }

    #[inline]
    fn add_linear(&mut self, _macs: u64) {
        #[cfg(feature = "flop-counter")]
        {
            self.linear_macs += _macs;
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.attention_macs + self.linear_macs
    }

    /// Two floating-point operations per multiply-accumulate.
    pub fn flops(&self) -> f64 {
        2.0 * self.total_macs() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Output of each decoder layer.
    pub hidden_states: Vec<Array2<f64>>,
    /// Normalized final hidden states that feed the tied output head.
    pub final_hidden: Array2<f64>,
    /// One row per requested position (all positions for [`forward`]).
    pub logits: Array2<f64>,
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
}

pub(crate) enum Attend<'a> {
    /// Flattened sequence under a dense mask; scores are computed over the
    /// causal envelope and disallowed entries get zero weight.
    Masked(&'a AttentionMask),
    /// Every new token sees all prefix rows plus earlier new tokens.
    Cached(&'a [LayerKv]),
}

pub(crate) enum LogitRows {
    All,
    Rows(Vec<usize>),
    Last,
}

pub(crate) struct LayerTape {
    pub x_in: Array2<f64>,
    pub inv1: Vec<f64>,
    pub h1: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// `heads x n x n` attention weights (zero outside allowed entries).
    pub probs: Vec<f64>,
    pub ctx: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub inv2: Vec<f64>,
    pub h2: Array2<f64>,
    pub u: Array2<f64>,
    pub act: Array2<f64>,
}

pub(crate) struct Tape {
    pub layers: Vec<LayerTape>,
    pub x_out: Array2<f64>,
    pub inv_f: Vec<f64>,
}

pub(crate) struct RunOutput {
    pub trace: ForwardTrace,
    pub tape: Option<Tape>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

pub(crate) fn rms_norm(x: &Array2<f64>, gain: &ndarray::Array1<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let r = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + NORM_EPS).sqrt();
        inv.push(r);
        row.iter_mut().zip(gain.iter()).for_each(|(v, g)| *v *= r * g);
    }
    (out, inv)
}

fn embed(model: &Model, tokens: &[Token], start: usize) -> Result<Array2<f64>, ModelError> {
    let cfg = &model.config;
    let p = &model.params;
    if start + tokens.len() > cfg.max_positions {
        return Err(ModelError::ShapeMismatch(format!(
            "positions {}..{} exceed max_positions {}",
            start,
            start + tokens.len(),
            cfg.max_positions
        )));
    }
    let mut x = p
        .position_embeddings
        .slice(s![start..start + tokens.len(), ..])
        .to_owned();
    for (mut row, tok) in x.rows_mut().into_iter().zip(tokens) {
        let src = match *tok {
            Token::Item(id) => {
                if id as usize >= cfg.vocab_size {
                    return Err(ModelError::VocabOverflow {
                        item: id,
                        vocab: cfg.vocab_size,
                    });
                }
                p.item_embeddings.row(id as usize)
            }
            Token::Expert(g) => {
                if g >= cfg.num_expert_slots {
                    return Err(ModelError::ShapeMismatch(format!(
                        "expert slot {g} >= num_expert_slots {}",
                        cfg.num_expert_slots
                    )));
                }
                p.expert_embeddings.row(g)
            }
        };
        row += &src;
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    prefix: Option<&LayerKv>,
    mask: Option<&AttentionMask>,
    heads: usize,
    mut probs_out: Option<&mut Vec<f64>>,
    counter: &mut FlopCounter,
) -> Array2<f64> {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let p = prefix.map_or(0, LayerKv::len);
    let empty = Array2::zeros((0, d));
    let (pk, pv) = prefix.map_or((&empty, &empty), |c| (&c.keys, &c.values));
    let (qs, ks, vs) = (
        q.as_slice().unwrap(),
        k.as_slice().unwrap(),
        v.as_slice().unwrap(),
    );
    let (pks, pvs) = (pk.as_slice().unwrap(), pv.as_slice().unwrap());
    let mut ctx = Array2::<f64>::zeros((n, d));
    let cs = ctx.as_slice_mut().unwrap();
    let mut scores = vec![0.0; p + n];
    let mut allowed = vec![true; p + n];

    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &qs[i * d + off..i * d + off + dh];
            let total = p + i + 1;
            for j in 0..p {
                let kj = &pks[j * d + off..j * d + off + dh];
                scores[j] = dot(qi, kj) * scale;
            }
            for j in 0..=i {
                let kj = &ks[j * d + off..j * d + off + dh];
                scores[p + j] = dot(qi, kj) * scale;
                allowed[p + j] = mask.is_none_or(|m| m.get(i, j));
            }
            let max = (0..total)
                .filter(|&j| allowed[j])
                .map(|j| scores[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..total {
                scores[j] = if allowed[j] {
                    (scores[j] - max).exp()
                } else {
                    0.0
                };
                sum += scores[j];
            }
            let inv = 1.0 / sum;
            let ci = &mut cs[i * d + off..i * d + off + dh];
            for j in 0..total {
                let w = scores[j] * inv;
                scores[j] = w;
                let vj = if j < p {
                    &pvs[j * d + off..j * d + off + dh]
                } else {
                    &vs[(j - p) * d + off..(j - p) * d + off + dh]
                };
                ci.iter_mut().zip(vj).for_each(|(c, x)| *c += w * x);
            }
            if let Some(out) = probs_out.as_deref_mut() {
                let row = &mut out[(h * n + i) * n..(h * n + i) * n + n];
                row[..=i].copy_from_slice(&scores[p..total]);
            }
            counter.add_attention(2 * (total * dh) as u64);
        }
    }
    ctx
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn run_inputs(
    model: &Model,
    x0: Array2<f64>,
    attend: &Attend<'_>,
    logit_rows: LogitRows,
    record: bool,
    counter: &mut FlopCounter,
) -> Result<RunOutput, ModelError> {
    let cfg = &model.config;
    let (n, d) = x0.dim();
    if let Attend::Cached(prefix) = attend {
        if prefix.len() != cfg.num_layers {
            return Err(ModelError::CacheLayerMismatch {
                expected: cfg.num_layers,
                got: prefix.len(),
            });
        }
        if prefix.iter().any(|kv| kv.keys.ncols() != d || kv.values.ncols() != d) {
            return Err(ModelError::ShapeMismatch("cache rows must have model_dim columns".into()));
        }
    }
    if let Attend::Masked(mask) = attend {
        if mask.n() != n {
            return Err(ModelError::ShapeMismatch(format!(
                "mask side {} != sequence length {n}",
                mask.n()
            )));
        }
    }
    let nn = n as u64;
    let (du, fu) = (d as u64, cfg.ffn_dim as u64);
    let mut x = x0;
    let mut hidden_states = Vec::with_capacity(cfg.num_layers);
    let mut keys = Vec::with_capacity(cfg.num_layers);
    let mut values = Vec::with_capacity(cfg.num_layers);
    let mut tapes = Vec::new();

    for (li, layer) in model.params.layers.iter().enumerate() {
        let (h1, inv1) = rms_norm(&x, &layer.attn_norm);
        let q = h1.dot(&layer.wq);
        let k = h1.dot(&layer.wk);
        let v = h1.dot(&layer.wv);
        counter.add_linear(3 * nn * du * du);
        let mut probs = record.then(|| vec![0.0; cfg.num_heads * n * n]);
        let (prefix, mask) = match attend {
            Attend::Masked(m) => (None, Some(*m)),
            Attend::Cached(c) => (Some(&c[li]), None),
        };
        let ctx = attention(&q, &k, &v, prefix, mask, cfg.num_heads, probs.as_mut(), counter);
        let x_mid = &x + &ctx.dot(&layer.wo);
        counter.add_linear(nn * du * du);
        let (h2, inv2) = rms_norm(&x_mid, &layer.ffn_norm);
        let u = h2.dot(&layer.w1);
        let act = u.mapv(gelu);
        let x_out = &x_mid + &act.dot(&layer.w2);
        counter.add_linear(2 * nn * du * fu);

        if record {
            tapes.push(LayerTape {
                x_in: x,
                inv1,
                h1,
                q,
                k: k.clone(),
                v: v.clone(),
                probs: probs.unwrap_or_default(),
                ctx,
                x_mid,
                inv2,
                h2,
                u,
                act,
            });
        }
        keys.push(k);
        values.push(v);
        hidden_states.push(x_out.clone());
        x = x_out;
    }

    let (hf, inv_f) = rms_norm(&x, &model.params.final_norm);
    let head = model.params.item_embeddings.t();
    let logits = match logit_rows {
        LogitRows::All => hf.dot(&head),
        LogitRows::Rows(rows) => hf.select(Axis(0), &rows).dot(&head),
        LogitRows::Last if n > 0 => hf.slice(s![n - 1..n, ..]).dot(&head),
        LogitRows::Last => Array2::zeros((0, cfg.vocab_size)),
    };
    let tape = record.then_some(Tape {
        layers: tapes,
        x_out: x,
        inv_f,
    });
    Ok(RunOutput {
        trace: ForwardTrace {
            hidden_states,
            final_hidden: hf,
            logits,
            keys,
            values,
        },
        tape,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run(
    model: &Model,
    tokens: &[Token],
    start_position: usize,
    attend: &Attend<'_>,
    logit_rows: LogitRows,
    record: bool,
    counter: &mut FlopCounter,
) -> Result<RunOutput, ModelError> {
    let x0 = embed(model, tokens, start_position)?;
    run_inputs(model, x0, attend, logit_rows, record, counter)
}

fn check_layout(layout: &TokenLayout, item_ids: &[u32], mask: &AttentionMask) -> Result<(), ModelError> {
    if item_ids.len() != layout.num_items() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} item ids for {} item slots",
            item_ids.len(),
            layout.num_items()
        )));
    }
    if mask.n() != layout.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "mask side {} != layout length {}",
            mask.n(),
            layout.len()
        )));
    }
    Ok(())
}

/// Full flattened forward pass; logits for every slot.
pub fn forward(
    model: &Model,
    layout: &TokenLayout,
    item_ids: &[u32],
    mask: &AttentionMask,
) -> Result<ForwardTrace, ModelError> {
    forward_counted(model, layout, item_ids, mask, &mut FlopCounter::default())
}

pub fn forward_counted(
    model: &Model,
    layout: &TokenLayout,
    item_ids: &[u32],
    mask: &AttentionMask,
    counter: &mut FlopCounter,
) -> Result<ForwardTrace, ModelError> {
    check_layout(layout, item_ids, mask)?;
    let tokens = Token::from_layout(layout, item_ids);
    Ok(run(model, &tokens, 0, &Attend::Masked(mask), LogitRows::All, false, counter)?.trace)
}

/// Runs one segment's tokens (starting at flattened position `start_position`)
/// against cached key/value rows. Returns the trace for the new tokens and
/// the key/value rows of the new expert tokens.
pub fn forward_with_cache(
    model: &Model,
    prior: &[LayerKv],
    tokens: &[Token],
    start_position: usize,
) -> Result<(ForwardTrace, Vec<LayerKv>), ModelError> {
    forward_with_cache_counted(model, prior, tokens, start_position, &mut FlopCounter::default())
}

pub fn forward_with_cache_counted(
    model: &Model,
    prior: &[LayerKv],
    tokens: &[Token],
    start_position: usize,
    counter: &mut FlopCounter,
) -> Result<(ForwardTrace, Vec<LayerKv>), ModelError> {
    let out = run(model, tokens, start_position, &Attend::Cached(prior), LogitRows::All, false, counter)?;
    let new_kv = expert_rows(&out.trace, tokens);
    Ok((out.trace, new_kv))
}

pub(crate) fn expert_rows(trace: &ForwardTrace, tokens: &[Token]) -> Vec<LayerKv> {
    let idx: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, Token::Expert(_)))
        .map(|(i, _)| i)
        .collect();
    trace
        .keys
        .iter()
        .zip(&trace.values)
        .map(|(k, v)| LayerKv {
            keys: k.select(Axis(0), &idx),
            values: v.select(Axis(0), &idx),
        })
        .collect()
}
