//! Closed-form compute model for segment compression and an instrumented
//! counterpart that measures the transformer kernels.
//!
//! Two flavours of analytic cost are provided. The constant-free one is the
//! big-O expression `L(n^2 d + n d^2)` and its ratios. The calibrated one
//! weights the causal attention triangle and the per-token linear work with
//! coefficients that match what [`FlopCounter`] records, and it sums exact
//! per-segment costs for arbitrary plans.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::inference::{compress_segments_counted, score_recent, InferenceError};
use crate::maskgen::segmented_mask;
use crate::seqcore::{build_plan, SegmentationPlan, SeqError, TokenLayout};
use crate::tinyformer::{forward_counted, FlopCounter, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("InstrumentationDisabled: build with the `flop-counter` feature")]
    InstrumentationDisabled,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Seq(#[from] SeqError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostParams {
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub n: usize,
    pub d: usize,
    /// Total expert tokens.
    pub k: usize,
    /// Segment count.
    pub m: usize,
}

impl CostParams {
    /// Checks positivity and returns advisory warnings.
    pub fn validate(&self) -> Result<Vec<String>, CostError> {
        if self.num_layers == 0 || self.n == 0 || self.d == 0 || self.m == 0 {
            return Err(CostError::InvalidParams("L, n, d and m must be positive".into()));
        }
        let mut warnings = Vec::new();
        if self.k > 0 && self.m + 1 > self.k {
            warnings.push(format!(
                "m = {} exceeds k - 1 = {}; with one expert per segment there are not enough experts for every segment",
                self.m,
                self.k as i64 - 1
            ));
        }
        if self.m > self.n {
            warnings.push(format!("m = {} exceeds n = {}; segments would be empty", self.m, self.n));
        }
        Ok(warnings)
    }

    pub fn alpha(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

/// `L (n^2 d + n d^2)`.
pub fn baseline_cost(p: &CostParams) -> f64 {
    let (l, n, d) = (p.num_layers as f64, p.n as f64, p.d as f64);
    l * (n * n * d + n * d * d)
}

/// Flattened training cost with `k` extra tokens.
pub fn training_cost(p: &CostParams) -> f64 {
    baseline_cost(&CostParams { n: p.n + p.k, ..*p })
}

/// Exact `((n+k)^2 d + (n+k) d^2) / (n^2 d + n d^2)`.
pub fn training_ratio(p: &CostParams) -> f64 {
    training_cost(p) / baseline_cost(p)
}

/// `1 + alpha`.
pub fn training_ratio_approx(p: &CostParams) -> f64 {
    1.0 + p.alpha()
}

/// `L ((n+k)^2 d / m + (n+k) d^2)`.
pub fn inference_cost(p: &CostParams) -> f64 {
    let (l, nk, d, m) = (p.num_layers as f64, (p.n + p.k) as f64, p.d as f64, p.m as f64);
    l * (nk * nk * d / m + nk * d * d)
}

/// `S = ((1+a)^2 n / m + (1+a) d) / (n + d)`.
pub fn inference_ratio(p: &CostParams) -> f64 {
    let (n, d, m) = (p.n as f64, p.d as f64, p.m as f64);
    let a = 1.0 + p.alpha();
    (a * a * n / m + a * d) / (n + d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub params: CostParams,
    pub alpha: f64,
    pub baseline_flops: f64,
    pub training_flops: f64,
    pub inference_flops: f64,
    pub training_ratio: f64,
    pub training_ratio_approx: f64,
    pub inference_ratio: f64,
    pub calibrated: Option<CalibratedCosts>,
    pub warnings: Vec<String>,
}

pub fn cost_report(p: &CostParams) -> Result<CostReport, CostError> {
    let warnings = p.validate()?;
    Ok(CostReport {
        params: *p,
        alpha: p.alpha(),
        baseline_flops: baseline_cost(p),
        training_flops: training_cost(p),
        inference_flops: inference_cost(p),
        training_ratio: training_ratio(p),
        training_ratio_approx: training_ratio_approx(p),
        inference_ratio: inference_ratio(p),
        calibrated: None,
        warnings,
    })
}

impl CostReport {
    /// Adds calibrated costs for the even plan of these parameters.
    pub fn with_calibration(mut self, cal: &Calibration) -> Result<Self, CostError> {
        let plan = even_plan(self.params.n, self.params.m, self.params.k)?;
        self.calibrated = Some(calibrated_costs(&plan, self.params.d, self.params.num_layers, cal));
        Ok(self)
    }

    pub fn csv_header() -> &'static str {
        "L,n,d,k,m,alpha,baseline_flops,training_flops,inference_flops,training_ratio,training_ratio_approx,inference_ratio,calibrated_training_ratio,calibrated_inference_ratio"
    }

    pub fn csv_row(&self) -> String {
        let p = &self.params;
        let (ct, ci) = self
            .calibrated
            .as_ref()
            .map_or((String::new(), String::new()), |c| {
                (format!("{:.6}", c.training_ratio), format!("{:.6}", c.inference_ratio))
            });
        format!(
            "{},{},{},{},{},{:.6},{:.6e},{:.6e},{:.6e},{:.6},{:.6},{:.6},{},{}",
            p.num_layers,
            p.n,
            p.d,
            p.k,
            p.m,
            self.alpha,
            self.baseline_flops,
            self.training_flops,
            self.inference_flops,
            self.training_ratio,
            self.training_ratio_approx,
            self.inference_ratio,
            ct,
            ci
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(f, "{:<26}L={} n={} d={} k={} m={}", "parameters", p.num_layers, p.n, p.d, p.k, p.m)?;
        writeln!(f, "{:<26}{:.6}", "alpha = k/n", self.alpha)?;
        writeln!(f, "{:<26}{:.4e}", "baseline C_b", self.baseline_flops)?;
        writeln!(f, "{:<26}{:.4e}", "training C_t", self.training_flops)?;
        writeln!(f, "{:<26}{:.4e}", "inference C_i", self.inference_flops)?;
        writeln!(f, "{:<26}{:.6}", "training ratio (exact)", self.training_ratio)?;
        writeln!(f, "{:<26}{:.6}", "training ratio (1+alpha)", self.training_ratio_approx)?;
        writeln!(f, "{:<26}{:.6}", "inference ratio S", self.inference_ratio)?;
        if let Some(c) = &self.calibrated {
            writeln!(f, "{:<26}{:.6}", "calibrated training ratio", c.training_ratio)?;
            writeln!(f, "{:<26}{:.6}", "calibrated inference S", c.inference_ratio)?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Coefficients of the calibrated cost: `attention` FLOPs per causal
/// query-key pair per model dimension, `linear` FLOPs per token per `d^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub attention: f64,
    pub linear: f64,
}

impl Calibration {
    /// Coefficients implied by the kernel structure: scores plus weighted sum
    /// give 2 MACs per pair per dimension; Q/K/V/O give `4 d^2` and the FFN
    /// `2 d ffn` MACs per token.
    pub fn for_ffn(d: usize, ffn: usize) -> Self {
        Calibration {
            attention: 4.0,
            linear: 2.0 * (4.0 + 2.0 * ffn as f64 / d as f64),
        }
    }

    /// Least-squares fit from measured single-segment forward FLOPs
    /// `(n, flops)` for one `(L, d)`.
    pub fn fit(samples: &[(usize, f64)], d: usize, num_layers: usize) -> Result<Self, CostError> {
        if samples.len() < 2 {
            return Err(CostError::InvalidParams("calibration needs at least two shapes".into()));
        }
        let (l, d) = (num_layers as f64, d as f64);
        // flops = attention * x1 + linear * x2
        let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(n, y) in samples {
            let n = n as f64;
            let x1 = l * d * n * (n + 1.0) / 2.0;
            let x2 = l * n * d * d;
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            b1 += x1 * y;
            b2 += x2 * y;
        }
        let det = s11 * s22 - s12 * s12;
        if det.abs() <= f64::EPSILON * s11 * s22 {
            return Err(CostError::InvalidParams("calibration shapes must differ in n".into()));
        }
        Ok(Calibration {
            attention: (b1 * s22 - b2 * s12) / det,
            linear: (s11 * b2 - s12 * b1) / det,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibratedCosts {
    pub baseline_flops: f64,
    pub training_flops: f64,
    pub inference_flops: f64,
    pub training_ratio: f64,
    pub inference_ratio: f64,
}

/// Calibrated cost of `q` new tokens attending causally among themselves and
/// to `p` cached keys.
fn block_cost(q: usize, p: usize, d: usize, cal: &Calibration) -> f64 {
    let (q, p, d) = (q as f64, p as f64, d as f64);
    cal.attention * d * (q * (q + 1.0) / 2.0 + q * p) + cal.linear * q * d * d
}

/// Flattened forward over the whole plan (the causal envelope).
pub fn calibrated_train_cost(plan: &SegmentationPlan, d: usize, num_layers: usize, cal: &Calibration) -> f64 {
    num_layers as f64 * block_cost(plan.flat_len(), 0, d, cal)
}

/// Segment-by-segment cached cost: each compressed segment runs its items
/// and experts against the expert keys cached so far, and the final segment
/// runs its items against every cached expert. Segments without experts are
/// skipped since nothing later can see them.
pub fn calibrated_cached_cost(plan: &SegmentationPlan, d: usize, num_layers: usize, cal: &Calibration) -> f64 {
    let segs = plan.num_segments();
    let mut cached = 0;
    let mut total = 0.0;
    for (j, (&len, &k)) in plan
        .segment_lengths()
        .iter()
        .zip(plan.experts_per_segment())
        .enumerate()
    {
        if j + 1 == segs {
            total += block_cost(len, cached, d, cal);
        } else if k > 0 {
            total += block_cost(len + k, cached, d, cal);
            cached += k;
        }
    }
    num_layers as f64 * total
}

pub fn calibrated_costs(plan: &SegmentationPlan, d: usize, num_layers: usize, cal: &Calibration) -> CalibratedCosts {
    let baseline = num_layers as f64 * block_cost(plan.total_items(), 0, d, cal);
    let training = calibrated_train_cost(plan, d, num_layers, cal);
    let inference = calibrated_cached_cost(plan, d, num_layers, cal);
    CalibratedCosts {
        baseline_flops: baseline,
        training_flops: training,
        inference_flops: inference,
        training_ratio: training / baseline,
        inference_ratio: inference / baseline,
    }
}

/// `m` near-equal segments over `n` items. With `m > 1` the `k` experts are
/// spread over the first `m - 1` segments (earlier segments take the
/// remainder); with `m = 1` they trail the single segment, which affects
/// training cost only.
pub fn even_plan(n: usize, m: usize, k: usize) -> Result<SegmentationPlan, CostError> {
    if m == 0 || n < m {
        return Err(CostError::InvalidParams(format!("cannot split {n} items into {m} segments")));
    }
    let lens: Vec<usize> = (0..m).map(|j| n / m + usize::from(j < n % m)).collect();
    let experts: Vec<usize> = if m == 1 {
        vec![k]
    } else {
        let slots = m - 1;
        (0..m)
            .map(|j| if j < slots { k / slots + usize::from(j < k % slots) } else { 0 })
            .collect()
    };
    Ok(build_plan(&lens, &experts)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// One flattened forward pass under the segmented mask.
    TrainForward,
    /// Segment compression followed by scoring the final segment.
    CachedInference,
}

/// Instrumented FLOPs (2 per multiply-accumulate) for one pass over `plan`.
/// Item ids are arbitrary since cost does not depend on them.
pub fn measure_flops(model: &Model, plan: &SegmentationPlan, mode: Mode) -> Result<f64, CostError> {
    if !FlopCounter::ENABLED {
        return Err(CostError::InstrumentationDisabled);
    }
    let vocab = model.config.vocab_size as u32;
    let ids: Vec<u32> = (0..plan.total_items() as u32).map(|i| i % vocab).collect();
    let mut counter = FlopCounter::default();
    match mode {
        Mode::TrainForward => {
            let layout = TokenLayout::from_plan(plan);
            forward_counted(model, &layout, &ids, &segmented_mask(plan), &mut counter)?;
        }
        Mode::CachedInference => {
            let split = plan.prefix_items();
            let cache = compress_segments_counted(model, &ids[..split], plan, 0, &mut counter)?;
            score_recent(model, &cache, &ids[split..], 0, &mut counter)?;
        }
    }
    Ok(counter.flops())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasuredRatios {
    pub baseline_flops: f64,
    pub training_flops: f64,
    pub inference_flops: f64,
    pub training_ratio: f64,
    pub inference_ratio: f64,
}

/// Measured training and cached-inference cost relative to a plain causal
/// pass over the same items.
pub fn measure_ratios(model: &Model, plan: &SegmentationPlan) -> Result<MeasuredRatios, CostError> {
    let baseline = measure_flops(model, &SegmentationPlan::single(plan.total_items())?, Mode::TrainForward)?;
    let training = measure_flops(model, plan, Mode::TrainForward)?;
    let inference = measure_flops(model, plan, Mode::CachedInference)?;
    Ok(MeasuredRatios {
        baseline_flops: baseline,
        training_flops: training,
        inference_flops: inference,
        training_ratio: training / baseline,
        inference_ratio: inference / baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::{init_model, ModelConfig};
    use proptest::prelude::*;

    fn p(num_layers: usize, n: usize, d: usize, k: usize, m: usize) -> CostParams {
        CostParams { num_layers, n, d, k, m }
    }

    fn model(d: usize, ffn: usize, positions: usize, experts: usize) -> Model {
        init_model(&ModelConfig {
            num_layers: 1,
            model_dim: d,
            num_heads: 2,
            ffn_dim: ffn,
            vocab_size: 16,
            max_positions: positions,
            num_expert_slots: experts,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_cost(&p(1, 1, 1, 0, 1)), 2.0);
        let c = baseline_cost(&p(16, 1280, 64, 0, 1));
        assert_eq!(c, 16.0 * (1280.0f64.powi(2) * 64.0 + 1280.0 * 64.0 * 64.0));
        assert!((c - 1.762e9).abs() / 1.762e9 < 1e-3);
        let doubled = baseline_cost(&p(1, 200_000, 8, 0, 1)) / baseline_cost(&p(1, 100_000, 8, 0, 1));
        assert!((doubled - 4.0).abs() / 4.0 < 0.01);
    }

    #[test]
    fn training_ratio_examples() {
        assert_eq!(training_ratio(&p(3, 500, 32, 0, 1)), 1.0);
        // (1284^2*64 + 1284*64^2) / (1280^2*64 + 1280*64^2)
        let r = training_ratio(&p(16, 1280, 64, 4, 5));
        assert!((r - 110_773_248.0 / 110_100_480.0).abs() < 1e-12, "{r}");
        assert!((training_ratio_approx(&p(16, 1280, 64, 4, 5)) - 1.003125).abs() < 1e-12);
        let big = p(1, 1280, 64, 256, 5);
        assert!(training_ratio(&big) - training_ratio_approx(&big) > 0.1);
    }

    #[test]
    fn inference_ratio_examples() {
        let s = inference_ratio(&p(16, 1280, 64, 4, 5));
        assert!((s - 0.238).abs() <= 0.002, "{s}");
        assert_eq!(inference_ratio(&p(1, 700, 48, 0, 1)), 1.0);
        let series: Vec<f64> = (1..=32).map(|m| inference_ratio(&p(1, 1280, 64, 4, m))).collect();
        assert!(series.windows(2).all(|w| w[1] < w[0]));
        let q = p(2, 1280, 64, 4, 5);
        let nk = 1284.0f64;
        assert_eq!(inference_cost(&q), 2.0 * (nk * nk * 64.0 / 5.0 + nk * 64.0 * 64.0));
    }

    #[test]
    fn warnings_and_validation() {
        let r = cost_report(&p(16, 1280, 64, 4, 5)).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("k - 1"));
        assert!(cost_report(&p(16, 1280, 64, 8, 5)).unwrap().warnings.is_empty());
        assert!(matches!(cost_report(&p(0, 1, 1, 0, 1)), Err(CostError::InvalidParams(_))));
        assert!(r.inference_ratio <= r.training_ratio);
        let text = r.to_string();
        assert!(text.contains("inference ratio S"));
        assert_eq!(CostReport::csv_header().split(',').count(), r.csv_row().split(',').count());
    }

    #[test]
    fn even_plan_shapes() {
        let plan = even_plan(10, 3, 5).unwrap();
        assert_eq!(plan.segment_lengths(), &[4, 3, 3]);
        assert_eq!(plan.experts_per_segment(), &[3, 2, 0]);
        assert_eq!(even_plan(8, 1, 2).unwrap().experts_per_segment(), &[2]);
        assert!(even_plan(2, 3, 0).is_err());
    }

    #[test]
    fn calibrated_matches_instrumented_counts_exactly() {
        if !FlopCounter::ENABLED {
            return;
        }
        let (d, ffn) = (16, 24);
        let cal = Calibration::for_ffn(d, ffn);
        for (n, m, k) in [(40, 1, 0), (40, 1, 3), (40, 4, 3), (33, 3, 6), (20, 5, 2)] {
            let plan = even_plan(n, m, k).unwrap();
            let mdl = model(d, ffn, plan.flat_len(), k.max(1));
            let c = calibrated_costs(&plan, d, 1, &cal);
            let t = measure_flops(&mdl, &plan, Mode::TrainForward).unwrap();
            let i = measure_flops(&mdl, &plan, Mode::CachedInference).unwrap();
            assert!((t - c.training_flops).abs() < 1e-6 * t, "train {n} {m} {k}: {t} vs {}", c.training_flops);
            assert!((i - c.inference_flops).abs() < 1e-6 * i, "cached {n} {m} {k}: {i} vs {}", c.inference_flops);
        }
    }

    #[test]
    fn fitted_calibration_recovers_kernel_constants() {
        if !FlopCounter::ENABLED {
            return;
        }
        let (d, ffn) = (16, 40);
        let mdl = model(d, ffn, 96, 1);
        let samples: Vec<(usize, f64)> = [24, 64]
            .iter()
            .map(|&n| (n, measure_flops(&mdl, &SegmentationPlan::single(n).unwrap(), Mode::TrainForward).unwrap()))
            .collect();
        let fit = Calibration::fit(&samples, d, 1).unwrap();
        let exact = Calibration::for_ffn(d, ffn);
        assert!((fit.attention - exact.attention).abs() < 1e-6);
        assert!((fit.linear - exact.linear).abs() < 1e-6);
        // calibrated once, then within 2% on other shapes
        for n in [8, 40, 96] {
            let plan = SegmentationPlan::single(n).unwrap();
            let measured = measure_flops(&mdl, &plan, Mode::TrainForward).unwrap();
            let predicted = calibrated_train_cost(&plan, d, 1, &fit);
            assert!((measured - predicted).abs() / measured < 0.02);
        }
        assert!(Calibration::fit(&samples[..1], d, 1).is_err());
    }

    #[test]
    fn cached_without_experts_equals_baseline() {
        if !FlopCounter::ENABLED {
            return;
        }
        let mdl = model(8, 16, 30, 1);
        let plan = SegmentationPlan::single(30).unwrap();
        let r = measure_ratios(&mdl, &plan).unwrap();
        assert!((r.inference_ratio - 1.0).abs() < 0.01);
        assert_eq!(r.training_ratio, 1.0);
    }

    #[test]
    fn uneven_plan_measured_against_calibrated() {
        if !FlopCounter::ENABLED {
            return;
        }
        let plan = build_plan(&[1024, 256], &[4, 0]).unwrap();
        let mdl = model(16, 32, plan.flat_len(), 4);
        let r = measure_ratios(&mdl, &plan).unwrap();
        let c = calibrated_costs(&plan, 16, 1, &Calibration::for_ffn(16, 32));
        assert!((r.inference_ratio - c.inference_ratio).abs() <= 0.05 * c.inference_ratio);
        assert!((r.training_ratio - c.training_ratio).abs() <= 0.05 * c.training_ratio);
    }

    proptest! {
        #[test]
        fn s_non_increasing_in_m(n in 16usize..5000, d in 1usize..256, k in 0usize..64) {
            let mut prev = f64::INFINITY;
            for m in 1..=16 {
                let s = inference_ratio(&p(1, n, d, k, m));
                prop_assert!(s <= prev);
                prop_assert!(s > 0.0);
                if m > 1 {
                    prop_assert!(s <= training_ratio(&p(1, n, d, k, m)) + 1e-12);
                }
                prev = s;
            }
        }

        #[test]
        fn ratios_are_layer_independent(l in 1usize..32, n in 1usize..3000, d in 1usize..200, k in 0usize..50) {
            let a = training_ratio(&p(l, n, d, k, 1));
            let b = training_ratio(&p(1, n, d, k, 1));
            prop_assert!((a - b).abs() < 1e-12 * b);
        }

        #[test]
        fn calibrated_cached_never_exceeds_training(n in 8usize..200, m in 1usize..8, k in 0usize..12) {
            prop_assume!(n >= m);
            let plan = even_plan(n, m, k).unwrap();
            let c = calibrated_costs(&plan, 16, 2, &Calibration::for_ffn(16, 64));
            prop_assert!(c.inference_flops <= c.training_flops + 1e-9);
        }
    }
}
