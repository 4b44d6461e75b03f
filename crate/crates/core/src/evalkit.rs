//! Retrieval metrics and evaluation protocols: the standard next-item split,
//! a sliding recent window over the test span with frozen caches, and a
//! comparison of expert placement settings.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::inference::{compress_segments, score_recent, ExpertCache, InferenceError};
use crate::seqcore::{build_plan, SegmentationPlan, SeqError};
use crate::tinyformer::{FlopCounter, Model};
use crate::trainer::{train, TrainConfig, TrainError};

pub const DEFAULT_KS: [usize; 3] = [10, 50, 200];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("EmptyEvalSet: nothing to evaluate")]
    EmptyEvalSet,
    #[error("WindowTooLarge: window {window} exceeds {limit}")]
    WindowTooLarge { window: usize, limit: usize },
    #[error("InconsistentTotals: setting {index} covers {got} items, expected {expected}")]
    InconsistentTotals { index: usize, expected: usize, got: usize },
    #[error("CacheChanged: cache fingerprint changed at offset {offset}")]
    CacheChanged { offset: usize },
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `target` under descending score with ties broken by
/// ascending item id, the same order `top_k` produces.
pub fn rank_of(scores: &[f64], target: u32) -> usize {
    let t = target as usize;
    let st = scores[t];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > st || (s == st && i < t))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self, EvalError> {
        if ranks.is_empty() {
            return Err(EvalError::EmptyEvalSet);
        }
        let n = ranks.len() as f64;
        let mut recall_at = BTreeMap::new();
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            recall_at.insert(k, ranks.iter().map(|&r| recall_at_k(r, k)).sum::<f64>() / n);
            ndcg_at.insert(k, ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n);
        }
        Ok(Metrics {
            recall_at,
            ndcg_at,
            num_queries: ranks.len(),
        })
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Model input for a history under `plan`: the last `total_items` events, or
/// the whole history as one segment when it is shorter (cold start).
pub fn plan_input<'a>(history: &'a [u32], plan: &SegmentationPlan) -> Result<(&'a [u32], SegmentationPlan), EvalError> {
    if history.is_empty() {
        return Err(InferenceError::EmptyRecent.into());
    }
    let total = plan.total_items();
    if history.len() >= total {
        Ok((&history[history.len() - total..], plan.clone()))
    } else {
        Ok((history, SegmentationPlan::single(history.len())?))
    }
}

/// Scores every item as the next event after `history`.
pub fn score_history(model: &Model, history: &[u32], plan: &SegmentationPlan) -> Result<Vec<f64>, EvalError> {
    let (input, plan) = plan_input(history, plan)?;
    let split = plan.prefix_items();
    let cache = compress_segments(model, &input[..split], &plan, 0)?;
    Ok(score_recent(model, &cache, &input[split..], 0, &mut FlopCounter::default())?)
}

/// Rank of each user's target among all items, given the events before it.
pub fn evaluate_ranks(
    model: &Model,
    histories: &[Vec<u32>],
    targets: &[u32],
    plan: &SegmentationPlan,
) -> Result<Vec<usize>, EvalError> {
    if histories.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    if histories.len() != targets.len() {
        return Err(EvalError::InvalidArgument(format!(
            "{} histories but {} targets",
            histories.len(),
            targets.len()
        )));
    }
    histories
        .par_iter()
        .zip(targets)
        .map(|(h, &t)| {
            if t as usize >= model.config.vocab_size {
                return Err(EvalError::InvalidArgument(format!("target {t} outside the vocabulary")));
            }
            Ok(rank_of(&score_history(model, h, plan)?, t))
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    histories: &[Vec<u32>],
    targets: &[u32],
    plan: &SegmentationPlan,
    ks: &[usize],
) -> Result<Metrics, EvalError> {
    Metrics::from_ranks(&evaluate_ranks(model, histories, targets, plan)?, ks)
}

/// One user in the sliding-window protocol: a frozen cache and the full
/// sequence whose first `train_len` events are the training part.
pub struct DecayUser<'a> {
    pub cache: &'a ExpertCache,
    pub sequence: &'a [u32],
    pub train_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayPoint {
    pub offset: usize,
    pub metrics: Metrics,
    /// CRC over every user's cache fingerprint at this offset.
    pub cache_fingerprint: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecaySeries {
    pub window: usize,
    pub stride: usize,
    pub points: Vec<DecayPoint>,
}

/// Offsets `0, stride, ...` up to `span - window`.
pub fn decay_offsets(span: usize, window: usize, stride: usize) -> Result<Vec<usize>, EvalError> {
    if stride == 0 || window == 0 {
        return Err(EvalError::InvalidArgument("window and stride must be positive".into()));
    }
    if window > span {
        return Err(EvalError::WindowTooLarge { window, limit: span });
    }
    Ok((0..=span - window).step_by(stride).collect())
}

fn combined_fingerprint(users: &[DecayUser<'_>]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for u in users {
        h.update(&u.cache.fingerprint().to_le_bytes());
    }
    h.finalize()
}

/// Slides a recent window of `window` events across the test span. At offset
/// `o` the target is event `train_len + o` and the window holds the `window`
/// events before it; the caches built from the older events are reused
/// unchanged at every offset. Offset 0 reproduces the standard split.
pub fn decay_eval(
    model: &Model,
    users: &[DecayUser<'_>],
    window: usize,
    stride: usize,
    ks: &[usize],
) -> Result<DecaySeries, EvalError> {
    if users.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    let span = users
        .iter()
        .map(|u| u.sequence.len().saturating_sub(u.train_len))
        .min()
        .unwrap_or(0);
    let capacity = users.iter().map(|u| u.cache.recent_capacity()).min().unwrap_or(0);
    if window > capacity {
        return Err(EvalError::WindowTooLarge { window, limit: capacity });
    }
    if let Some(u) = users.iter().find(|u| u.train_len < window) {
        return Err(EvalError::WindowTooLarge {
            window,
            limit: u.train_len,
        });
    }
    let offsets = decay_offsets(span, window, stride)?;
    let frozen = combined_fingerprint(users);
    let mut points = Vec::with_capacity(offsets.len());
    for &offset in &offsets {
        let ranks: Vec<usize> = users
            .par_iter()
            .map(|u| {
                let end = u.train_len + offset;
                let recent = &u.sequence[end - window..end];
                let scores = score_recent(model, u.cache, recent, offset, &mut FlopCounter::default())?;
                Ok(rank_of(&scores, u.sequence[end]))
            })
            .collect::<Result<_, EvalError>>()?;
        let fp = combined_fingerprint(users);
        if fp != frozen {
            return Err(EvalError::CacheChanged { offset });
        }
        points.push(DecayPoint {
            offset,
            metrics: Metrics::from_ranks(&ranks, ks)?,
            cache_fingerprint: fp,
        });
    }
    Ok(DecaySeries { window, stride, points })
}

/// Splits `pretrain_len` into `experts.len()` near-equal segments carrying
/// the given expert counts, followed by a recent segment without experts.
pub fn placement_plan(pretrain_len: usize, recent_len: usize, experts: &[usize]) -> Result<SegmentationPlan, EvalError> {
    let m = experts.len();
    if m == 0 || pretrain_len < m {
        return Err(EvalError::InvalidArgument(format!(
            "cannot split {pretrain_len} pretrain items into {m} segments"
        )));
    }
    let mut lens: Vec<usize> = (0..m).map(|j| pretrain_len / m + usize::from(j < pretrain_len % m)).collect();
    lens.push(recent_len);
    let mut ks = experts.to_vec();
    ks.push(0);
    Ok(build_plan(&lens, &ks)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementRow {
    pub setting: String,
    pub metrics: Metrics,
}

/// Short label of a plan's expert placement over its non-final segments,
/// e.g. `[2,2]`.
pub fn setting_label(plan: &SegmentationPlan) -> String {
    let ks = &plan.experts_per_segment()[..plan.num_segments().saturating_sub(1).max(1)];
    format!("[{}]", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
}

/// Trains one model per setting from `make_model` (same seeds each time)
/// and evaluates it on the next-item targets.
#[allow(clippy::too_many_arguments)]
pub fn placement_compare<F>(
    make_model: F,
    train_cfg: &TrainConfig,
    settings: &[SegmentationPlan],
    train_sequences: &[Vec<u32>],
    targets: &[u32],
    ks: &[usize],
) -> Result<Vec<PlacementRow>, EvalError>
where
    F: Fn(&SegmentationPlan) -> Model,
{
    let first = settings.first().ok_or(EvalError::EmptyEvalSet)?;
    let expected = first.total_items();
    for (index, s) in settings.iter().enumerate() {
        if s.total_items() != expected {
            return Err(EvalError::InconsistentTotals {
                index,
                expected,
                got: s.total_items(),
            });
        }
    }
    settings
        .iter()
        .map(|plan| {
            let (model, _) = train(make_model(plan), train_sequences, plan, train_cfg)?;
            Ok(PlacementRow {
                setting: setting_label(plan),
                metrics: evaluate(&model, train_sequences, targets, plan, ks)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub method: String,
    pub pretrain_len: usize,
    pub recent_len: usize,
    pub metrics: Metrics,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<(), EvalError> {
    writeln!(out, "method,pretrain_len,recent_len,K,recall,ndcg")?;
    for r in rows {
        for (&k, &recall) in &r.metrics.recall_at {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                r.method,
                r.pretrain_len,
                r.recent_len,
                k,
                recall,
                r.metrics.ndcg(k)
            )?;
        }
    }
    Ok(())
}

/// One block of rows per method.
pub fn write_decay_csv<W: Write>(series: &[(&str, &DecaySeries)], mut out: W) -> Result<(), EvalError> {
    writeln!(out, "method,offset,K,recall,ndcg")?;
    for (method, s) in series {
        for p in &s.points {
            for (&k, &recall) in &p.metrics.recall_at {
                writeln!(out, "{},{},{},{:.6},{:.6}", method, p.offset, k, recall, p.metrics.ndcg(k))?;
            }
        }
    }
    Ok(())
}

pub fn write_placement_csv<W: Write>(rows: &[PlacementRow], mut out: W) -> Result<(), EvalError> {
    writeln!(out, "setting,K,recall,ndcg")?;
    for r in rows {
        for (&k, &recall) in &r.metrics.recall_at {
            writeln!(out, "\"{}\",{},{:.6},{:.6}", r.setting, k, recall, r.metrics.ndcg(k))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::test_util::{random_model, small_config};
    use crate::tinyformer::{forward, init_model};
    use crate::maskgen::segmented_mask;
    use crate::seqcore::TokenLayout;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        assert_eq!((recall_at_k(1, 10), ndcg_at_k(1, 10)), (1.0, 1.0));
        assert_eq!(recall_at_k(3, 10), 1.0);
        assert!((ndcg_at_k(3, 10) - 0.5).abs() < 1e-15);
        assert_eq!((recall_at_k(11, 10), ndcg_at_k(11, 10)), (0.0, 0.0));
    }

    #[test]
    fn rank_tie_break() {
        let scores = [0.2, 0.9, 0.2, 0.9];
        assert_eq!(rank_of(&scores, 1), 1);
        assert_eq!(rank_of(&scores, 3), 2);
        assert_eq!(rank_of(&scores, 0), 3);
        assert_eq!(rank_of(&scores, 2), 4);
        // agrees with top_k ordering
        let order = crate::inference::top_k(&scores, 4).unwrap().item_ids();
        for (pos, &item) in order.iter().enumerate() {
            assert_eq!(rank_of(&scores, item), pos + 1);
        }
    }

    #[test]
    fn oracle_scores_are_perfect() {
        let ranks: Vec<usize> = (0..20u32)
            .map(|t| {
                let mut s = vec![0.0; 20];
                s[t as usize] = 1.0;
                rank_of(&s, t)
            })
            .collect();
        let m = Metrics::from_ranks(&ranks, &DEFAULT_KS).unwrap();
        assert!(m.recall_at.values().chain(m.ndcg_at.values()).all(|&v| v == 1.0));
        assert!(matches!(Metrics::from_ranks(&[], &[10]), Err(EvalError::EmptyEvalSet)));
    }

    #[test]
    fn untrained_model_recall_matches_chance() {
        let vocab = 200;
        let plan = build_plan(&[6, 4], &[1, 0]).unwrap();
        let model = random_model(&small_config(vocab, plan.flat_len(), 1, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 600;
        let histories: Vec<Vec<u32>> = (0..n)
            .map(|_| (0..10).map(|_| rng.random_range(0..vocab as u32)).collect())
            .collect();
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
        let m = evaluate(&model, &histories, &targets, &plan, &[10]).unwrap();
        let p = 10.0 / vocab as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((m.recall(10) - p).abs() <= 3.0 * sigma, "{} vs {p}", m.recall(10));
        assert_eq!(m.num_queries, n);
    }

    #[test]
    fn evaluation_matches_flattened_forward_and_handles_cold_start() {
        let plan = build_plan(&[5, 3], &[2, 0]).unwrap();
        let model = random_model(&small_config(15, plan.flat_len(), 2, 4));
        let hist: Vec<u32> = vec![9, 1, 2, 3, 4, 5, 6, 7, 8];
        let layout = TokenLayout::from_plan(&plan);
        let trace = forward(&model, &layout, &hist[1..], &segmented_mask(&plan)).unwrap();
        let last = *layout.item_positions().last().unwrap();
        let flat = trace.logits.row(last).to_vec();
        let scores = score_history(&model, &hist, &plan).unwrap();
        for (a, b) in flat.iter().zip(&scores) {
            assert!((a - b).abs() < 1e-9);
        }
        // shorter than the plan: one causal segment
        let short = score_history(&model, &[3, 4], &plan).unwrap();
        let single = SegmentationPlan::single(2).unwrap();
        let l2 = TokenLayout::from_plan(&single);
        let t2 = forward(&model, &l2, &[3, 4], &segmented_mask(&single)).unwrap();
        assert_eq!(short, t2.logits.row(1).to_vec());
    }

    #[test]
    fn decay_offsets_arithmetic() {
        assert_eq!(decay_offsets(720, 256, 64).unwrap().len(), 8);
        assert_eq!(decay_offsets(20, 16, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(decay_offsets(20, 20, 5).unwrap(), vec![0]);
        assert!(matches!(decay_offsets(10, 11, 1), Err(EvalError::WindowTooLarge { .. })));
    }

    #[test]
    fn decay_offset_zero_matches_standard_evaluation() {
        let plan = build_plan(&[6, 4], &[2, 0]).unwrap();
        let mut cfg = small_config(30, plan.flat_len(), 2, 8);
        cfg.max_positions = plan.flat_len();
        let model = init_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seqs: Vec<Vec<u32>> = (0..12)
            .map(|_| (0..20).map(|_| rng.random_range(0..30)).collect())
            .collect();
        let caches: Vec<ExpertCache> = seqs
            .iter()
            .map(|s| compress_segments(&model, &s[..6], &plan, 0).unwrap())
            .collect();
        let users: Vec<DecayUser> = seqs
            .iter()
            .zip(&caches)
            .map(|(s, c)| DecayUser {
                cache: c,
                sequence: s,
                train_len: 10,
            })
            .collect();
        let series = decay_eval(&model, &users, 4, 2, &[5, 10]).unwrap();
        assert_eq!(series.points.iter().map(|p| p.offset).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert!(series.points.windows(2).all(|w| w[0].cache_fingerprint == w[1].cache_fingerprint));
        let histories: Vec<Vec<u32>> = seqs.iter().map(|s| s[..10].to_vec()).collect();
        let targets: Vec<u32> = seqs.iter().map(|s| s[10]).collect();
        let standard = evaluate(&model, &histories, &targets, &plan, &[5, 10]).unwrap();
        assert_eq!(series.points[0].metrics, standard);
        assert!(matches!(
            decay_eval(&model, &users, 5, 1, &[5]),
            Err(EvalError::WindowTooLarge { .. })
        ));
        let mut csv = Vec::new();
        write_decay_csv(&[("personalized", &series)], &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn placement_settings() {
        let plan = placement_plan(10, 4, &[1, 1, 2]).unwrap();
        assert_eq!(plan.segment_lengths(), &[4, 3, 3, 4]);
        assert_eq!(plan.experts_per_segment(), &[1, 1, 2, 0]);
        assert_eq!(setting_label(&plan), "[1,1,2]");
        let paper: Vec<SegmentationPlan> = [vec![4], vec![2, 2], vec![1, 1, 1, 1], vec![1, 1, 2]]
            .iter()
            .map(|e| placement_plan(1024, 256, e).unwrap())
            .collect();
        assert!(paper.iter().all(|p| p.total_items() == 1280 && p.total_experts() == 4));

        let settings = vec![
            placement_plan(6, 3, &[2]).unwrap(),
            placement_plan(6, 3, &[2]).unwrap(),
            placement_plan(6, 3, &[1, 1]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seqs: Vec<Vec<u32>> = (0..8).map(|_| (0..9).map(|_| rng.random_range(0..12)).collect()).collect();
        let targets: Vec<u32> = (0..8).map(|_| rng.random_range(0..12)).collect();
        let make = |p: &SegmentationPlan| init_model(&small_config(12, p.flat_len(), p.total_experts(), 1)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let rows = placement_compare(make, &cfg, &settings, &seqs, &targets, &[5]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], rows[1]);
        let bad = vec![settings[0].clone(), placement_plan(6, 4, &[2]).unwrap()];
        assert!(matches!(
            placement_compare(make, &cfg, &bad, &seqs, &targets, &[5]),
            Err(EvalError::InconsistentTotals { index: 1, .. })
        ));
        let mut csv = Vec::new();
        write_placement_csv(&rows, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("setting,K,recall,ndcg\n\"[2]\",5,"));
    }

    #[test]
    fn metrics_csv_layout() {
        let m = Metrics::from_ranks(&[1, 20, 300], &DEFAULT_KS).unwrap();
        let rows = vec![MetricsRow {
            method: "full".into(),
            pretrain_len: 0,
            recent_len: 80,
            metrics: m,
        }];
        let mut csv = Vec::new();
        write_metrics_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,pretrain_len,recent_len,K,recall,ndcg");
        assert_eq!(lines[1], "full,0,80,10,0.333333,0.333333");
        assert_eq!(lines.len(), 4);
    }

    proptest! {
        #[test]
        fn metric_identities(ranks in proptest::collection::vec(1usize..500, 1..50)) {
            let ks = [1, 5, 10, 50, 200, 1000];
            let m = Metrics::from_ranks(&ranks, &ks).unwrap();
            let mut prev = 0.0;
            for &k in &ks {
                let r = m.recall(k);
                prop_assert!(r >= prev);
                prop_assert!(m.ndcg(k) <= r + 1e-15);
                prop_assert!((0.0..=1.0).contains(&r));
                prev = r;
            }
        }
    }
}
