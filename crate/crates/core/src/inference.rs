//! Two-phase serving: compress the older segments into a per-user cache of
//! expert key/value rows once, then score recent items against it.

use std::io::{Read, Write};

use ndarray::Array2;
use thiserror::Error;

use crate::seqcore::SegmentationPlan;
use crate::tinyformer::{
    forward_with_cache_counted, run, Attend, FlopCounter, LayerKv, LogitRows, Model, ModelError, Token,
};

pub const CACHE_MAGIC: &[u8; 4] = b"PSC1";
const CACHE_VERSION: u32 = 1;
/// Magic plus seven u32 header words.
pub const CACHE_HEADER_BYTES: usize = 4 + 7 * 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("PlanMismatch: {0}")]
    PlanMismatch(String),
    #[error("EmptyRecent: at least one recent item is required")]
    EmptyRecent,
    #[error("KTooLarge: K = {k} exceeds vocabulary size {vocab}")]
    KTooLarge { k: usize, vocab: usize },
    #[error("InvalidK: K must be at least 1")]
    InvalidK,
    #[error("RecentTooLong: {len} recent items exceed the last-segment capacity {capacity}")]
    RecentTooLong { len: usize, capacity: usize },
    #[error("InvalidSteps: steps must be at least 1")]
    InvalidSteps,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum CacheFileError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("BadMagic: expected PSC1")]
    BadMagic,
    #[error("UnsupportedVersion: {0}")]
    UnsupportedVersion(u32),
    #[error("UnsupportedFloatWidth: {0}")]
    UnsupportedFloatWidth(u32),
    #[error("PlanMismatch: {0}")]
    PlanMismatch(String),
    #[error("Truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Expert key/value rows of every compressed segment, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCache {
    layers: Vec<LayerKv>,
    positions: Vec<usize>,
    plan: SegmentationPlan,
    checkpoint_crc: u32,
}

impl ExpertCache {
    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    /// Flattened positions of the cached expert slots, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn plan(&self) -> &SegmentationPlan {
        &self.plan
    }

    pub fn num_experts(&self) -> usize {
        self.positions.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn model_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.ncols())
    }

    /// Position of the first recent item.
    pub fn next_position(&self) -> usize {
        self.plan.last_segment_start()
    }

    pub fn recent_capacity(&self) -> usize {
        self.plan.last_segment_len()
    }

    pub fn checkpoint_crc(&self) -> u32 {
        self.checkpoint_crc
    }

    /// Serialized size at the given float width.
    pub fn byte_size(&self, float_width: usize) -> usize {
        CACHE_HEADER_BYTES + 2 * self.num_layers() * self.num_experts() * self.model_dim() * float_width
    }

    /// CRC32 of the full-precision serialization.
    pub fn fingerprint(&self) -> u32 {
        let mut bytes = Vec::with_capacity(self.byte_size(8));
        write_cache_with_width(self, 8, &mut bytes).expect("writing to memory");
        crc32fast::hash(&bytes)
    }
}

/// Runs the non-final segments left to right, keeping only expert K/V rows.
pub fn compress_segments(
    model: &Model,
    events_prefix: &[u32],
    plan: &SegmentationPlan,
    checkpoint_crc: u32,
) -> Result<ExpertCache, InferenceError> {
    compress_segments_counted(model, events_prefix, plan, checkpoint_crc, &mut FlopCounter::default())
}

pub fn compress_segments_counted(
    model: &Model,
    events_prefix: &[u32],
    plan: &SegmentationPlan,
    checkpoint_crc: u32,
    counter: &mut FlopCounter,
) -> Result<ExpertCache, InferenceError> {
    if events_prefix.len() != plan.prefix_items() {
        return Err(InferenceError::PlanMismatch(format!(
            "{} prefix items for a plan whose non-final segments hold {}",
            events_prefix.len(),
            plan.prefix_items()
        )));
    }
    if plan.total_experts() > model.config.num_expert_slots {
        return Err(InferenceError::PlanMismatch(format!(
            "plan uses {} expert slots, model has {}",
            plan.total_experts(),
            model.config.num_expert_slots
        )));
    }
    let d = model.config.model_dim;
    let mut layers = vec![LayerKv::empty(d); model.config.num_layers];
    let mut positions = Vec::with_capacity(plan.prefix_experts());
    let mut item_offset = 0;
    let mut expert_offset = 0;
    let segs = plan.num_segments();
    for (j, (&len, &k)) in plan
        .segment_lengths()
        .iter()
        .zip(plan.experts_per_segment())
        .enumerate()
        .take(segs - 1)
    {
        let items = &events_prefix[item_offset..item_offset + len];
        item_offset += len;
        if k == 0 {
            // Nothing downstream can see this segment.
            continue;
        }
        let slots: Vec<usize> = (expert_offset..expert_offset + k).collect();
        expert_offset += k;
        let start = plan.segment_start(j);
        let tokens = Token::segment(items, &slots);
        let (_, new_kv) = forward_with_cache_counted(model, &layers, &tokens, start, counter)?;
        for (layer, kv) in layers.iter_mut().zip(&new_kv) {
            layer.append(kv);
        }
        positions.extend(start + len..start + len + k);
    }
    Ok(ExpertCache {
        layers,
        positions,
        plan: plan.clone(),
        checkpoint_crc,
    })
}

/// Item scores after the last recent item. `shift` is how many items the
/// recent window has slid past the start of the last segment; positions
/// saturate at `max_positions - recent.len()`.
pub fn score_recent(
    model: &Model,
    cache: &ExpertCache,
    recent: &[u32],
    shift: usize,
    counter: &mut FlopCounter,
) -> Result<Vec<f64>, InferenceError> {
    if recent.is_empty() {
        return Err(InferenceError::EmptyRecent);
    }
    if recent.len() > cache.recent_capacity() {
        return Err(InferenceError::RecentTooLong {
            len: recent.len(),
            capacity: cache.recent_capacity(),
        });
    }
    if cache.num_layers() != model.config.num_layers {
        return Err(ModelError::CacheLayerMismatch {
            expected: model.config.num_layers,
            got: cache.num_layers(),
        }
        .into());
    }
    let max_pos = model.config.max_positions;
    let start = (cache.next_position() + shift).min(max_pos.saturating_sub(recent.len()));
    let tokens: Vec<Token> = recent.iter().map(|&i| Token::Item(i)).collect();
    let out = run(model, &tokens, start, &Attend::Cached(&cache.layers), LogitRows::Last, false, counter)?;
    Ok(out.trace.logits.row(0).to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub items: Vec<(u32, f64)>,
}

impl Recommendation {
    pub fn item_ids(&self) -> Vec<u32> {
        self.items.iter().map(|&(i, _)| i).collect()
    }
}

/// Top-K by descending score, ties broken by ascending item id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Recommendation, InferenceError> {
    if k == 0 {
        return Err(InferenceError::InvalidK);
    }
    if k > scores.len() {
        return Err(InferenceError::KTooLarge { k, vocab: scores.len() });
    }
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(Recommendation {
        items: idx.into_iter().map(|i| (i, scores[i as usize])).collect(),
    })
}

pub fn recommend(
    model: &Model,
    cache: &ExpertCache,
    recent: &[u32],
    k: usize,
) -> Result<Recommendation, InferenceError> {
    recommend_counted(model, cache, recent, k, &mut FlopCounter::default())
}

pub fn recommend_counted(
    model: &Model,
    cache: &ExpertCache,
    recent: &[u32],
    k: usize,
    counter: &mut FlopCounter,
) -> Result<Recommendation, InferenceError> {
    if k > model.config.vocab_size {
        return Err(InferenceError::KTooLarge {
            k,
            vocab: model.config.vocab_size,
        });
    }
    let scores = score_recent(model, cache, recent, 0, counter)?;
    top_k(&scores, k)
}

/// Greedy generation: each step appends the top-1 item to the recent window,
/// dropping the oldest item once the window is full. The cache is not touched.
pub fn autoregress(
    model: &Model,
    cache: &ExpertCache,
    recent: &[u32],
    steps: usize,
    k: usize,
) -> Result<Vec<Recommendation>, InferenceError> {
    autoregress_counted(model, cache, recent, steps, k, &mut FlopCounter::default())
}

pub fn autoregress_counted(
    model: &Model,
    cache: &ExpertCache,
    recent: &[u32],
    steps: usize,
    k: usize,
    counter: &mut FlopCounter,
) -> Result<Vec<Recommendation>, InferenceError> {
    if steps == 0 {
        return Err(InferenceError::InvalidSteps);
    }
    if k > model.config.vocab_size {
        return Err(InferenceError::KTooLarge {
            k,
            vocab: model.config.vocab_size,
        });
    }
    let mut window = recent.to_vec();
    let mut shift = 0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let scores = score_recent(model, cache, &window, shift, counter)?;
        let rec = top_k(&scores, k)?;
        window.push(rec.items[0].0);
        if window.len() > cache.recent_capacity() {
            window.remove(0);
            shift += 1;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_cache<W: Write>(cache: &ExpertCache, out: W) -> Result<(), CacheFileError> {
    write_cache_with_width(cache, 4, out)
}

/// `float_width` is 4 (f32) or 8 (f64).
pub fn write_cache_with_width<W: Write>(cache: &ExpertCache, float_width: usize, mut out: W) -> Result<(), CacheFileError> {
    if float_width != 4 && float_width != 8 {
        return Err(CacheFileError::UnsupportedFloatWidth(float_width as u32));
    }
    let mut bytes = Vec::with_capacity(cache.byte_size(float_width));
    bytes.extend_from_slice(CACHE_MAGIC);
    for w in [
        CACHE_VERSION,
        cache.num_layers() as u32,
        cache.num_experts() as u32,
        cache.model_dim() as u32,
        float_width as u32,
        cache.plan.fingerprint(),
        cache.checkpoint_crc,
    ] {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    let mut put = |m: &Array2<f64>| {
        for &x in m.iter() {
            if float_width == 4 {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    };
    for layer in &cache.layers {
        put(&layer.keys);
        put(&layer.values);
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a cache file. The plan supplies expert positions and must match the
/// stored plan hash.
pub fn read_cache<R: Read>(mut input: R, plan: &SegmentationPlan) -> Result<ExpertCache, CacheFileError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(CacheFileError::BadMagic);
    }
    if bytes.len() < CACHE_HEADER_BYTES {
        return Err(CacheFileError::Truncated {
            expected: CACHE_HEADER_BYTES,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != CACHE_VERSION {
        return Err(CacheFileError::UnsupportedVersion(word(0)));
    }
    let (layers, k, d, width) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    if width != 4 && width != 8 {
        return Err(CacheFileError::UnsupportedFloatWidth(width as u32));
    }
    if word(5) != plan.fingerprint() {
        return Err(CacheFileError::PlanMismatch(format!(
            "stored plan hash {:#010x}, given plan {} hashes to {:#010x}",
            word(5),
            plan,
            plan.fingerprint()
        )));
    }
    let expected_k: usize = plan
        .experts_per_segment()
        .iter()
        .take(plan.num_segments() - 1)
        .sum();
    if k != expected_k {
        return Err(CacheFileError::PlanMismatch(format!("{k} cached experts, plan compresses {expected_k}")));
    }
    let expected = CACHE_HEADER_BYTES + 2 * layers * k * d * width;
    if bytes.len() != expected {
        return Err(CacheFileError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut floats = bytes[CACHE_HEADER_BYTES..].chunks_exact(width).map(|c| {
        if width == 4 {
            f64::from(f32::from_le_bytes(c.try_into().unwrap()))
        } else {
            f64::from_le_bytes(c.try_into().unwrap())
        }
    });
    let mut take = || Array2::from_shape_fn((k, d), |_| floats.next().expect("length checked"));
    let kv: Vec<LayerKv> = (0..layers)
        .map(|_| {
            let keys = take();
            let values = take();
            LayerKv { keys, values }
        })
        .collect();
    let mut positions = Vec::with_capacity(k);
    for j in 0..plan.num_segments() - 1 {
        let start = plan.segment_start(j) + plan.segment_lengths()[j];
        positions.extend(start..start + plan.experts_per_segment()[j]);
    }
    Ok(ExpertCache {
        layers: kv,
        positions,
        plan: plan.clone(),
        checkpoint_crc: word(6),
    })
}
