//! Expert attribution: fit each expert's final-layer output as a
//! non-negative combination of the hidden states of the items it summarizes.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use serde::Serialize;
use thiserror::Error;

use crate::maskgen::segmented_mask;
use crate::seqcore::{SegmentationPlan, Slot, TokenLayout};
use crate::tinyformer::{forward, Model, ModelError};

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LensError {
    #[error("DidNotConverge: no KKT point within {0} iterations")]
    DidNotConverge(usize),
    #[error("NoExperts: the plan has no expert on a non-final segment")]
    NoExperts,
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub weights: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// `argmin_w ||P^T w - x||` subject to `w >= 0`, where the rows of `p` are
/// the candidate vectors (items x d). Lawson-Hanson active-set method; stops
/// once every inactive coordinate has gradient at most `tol`.
pub fn nnls(p: &Array2<f64>, x: ArrayView1<'_, f64>, tol: f64, max_iter: usize) -> Result<NnlsSolution, LensError> {
    let (n, d) = p.dim();
    if x.len() != d {
        return Err(LensError::ShapeMismatch(format!("x has {} entries, rows of P have {d}", x.len())));
    }
    if !(tol > 0.0) {
        return Err(LensError::ShapeMismatch("tol must be positive".into()));
    }
    let a = DMatrix::from_fn(d, n, |i, j| p[[j, i]]);
    let b = DVector::from_iterator(d, x.iter().copied());
    let mut w = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let mut grad = a.transpose() * &b;
    let mut iterations = 0;

    let solve = |passive: &[bool]| -> DVector<f64> {
        let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut s = DVector::<f64>::zeros(n);
        if cols.is_empty() {
            return s;
        }
        let sub = DMatrix::from_fn(d, cols.len(), |i, c| a[(i, cols[c])]);
        let z = sub
            .svd(true, true)
            .solve(&b, 1e-13)
            .expect("both factors computed");
        for (c, &j) in cols.iter().enumerate() {
            s[j] = z[c];
        }
        s
    };

    loop {
        let next = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = next else { break };
        passive[j] = true;
        let mut s = solve(&passive);
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(LensError::DidNotConverge(max_iter));
            }
            let bad: Vec<usize> = (0..n).filter(|&i| passive[i] && s[i] <= 0.0).collect();
            if bad.is_empty() {
                break;
            }
            let alpha = bad
                .iter()
                .map(|&i| w[i] / (w[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            w += (&s - &w) * alpha;
            let floor = 1e-15 * (1.0 + w.amax());
            for i in 0..n {
                if passive[i] && w[i] <= floor {
                    passive[i] = false;
                    w[i] = 0.0;
                }
            }
            s = solve(&passive);
        }
        w = s;
        grad = a.transpose() * (&b - &a * &w);
    }
    let residual_norm = (&b - &a * &w).norm();
    Ok(NnlsSolution {
        weights: w.iter().copied().collect(),
        residual_norm,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributedItem {
    pub segment_position: usize,
    pub item_id: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution {
    /// Global expert slot.
    pub expert_slot: usize,
    pub segment: usize,
    /// One weight per item of the expert's segment.
    pub weights: Vec<f64>,
    pub top_items: Vec<AttributedItem>,
    pub residual_norm: f64,
}

/// Attributes every expert of the non-final segments. `P` holds the
/// final-layer hidden states of the items of the expert's own segment and
/// `x` is the expert's final-layer hidden state, both from one flattened
/// pass under the segmented mask. `user_events` must cover the plan.
pub fn attribute_experts(
    model: &Model,
    user_events: &[u32],
    plan: &SegmentationPlan,
    top_n: usize,
) -> Result<Vec<Attribution>, LensError> {
    if plan.prefix_experts() == 0 {
        return Err(LensError::NoExperts);
    }
    if user_events.len() != plan.total_items() {
        return Err(LensError::ShapeMismatch(format!(
            "{} events for a plan of {} items",
            user_events.len(),
            plan.total_items()
        )));
    }
    let layout = TokenLayout::from_plan(plan);
    let trace = forward(model, &layout, user_events, &segmented_mask(plan))?;
    let hidden = trace.hidden_states.last().expect("at least one layer");
    let item_index = layout.item_index_of();
    let last = plan.num_segments() - 1;
    let mut out = Vec::new();
    for seg in 0..last {
        let span = plan.segment_span(seg);
        let item_slots: Vec<usize> = span
            .clone()
            .filter(|&p| matches!(layout.slots[p], Slot::Item { .. }))
            .collect();
        let p = hidden.select(ndarray::Axis(0), &item_slots);
        for pos in span {
            let Slot::Expert { global, .. } = layout.slots[pos] else { continue };
            let sol = nnls(&p, hidden.row(pos), DEFAULT_TOL, 50 * (item_slots.len() + 1))?;
            let mut order: Vec<usize> = (0..sol.weights.len()).filter(|&i| sol.weights[i] > 0.0).collect();
            order.sort_by(|&i, &j| sol.weights[j].total_cmp(&sol.weights[i]).then(i.cmp(&j)));
            let top_items = order
                .into_iter()
                .take(top_n)
                .map(|i| AttributedItem {
                    segment_position: i,
                    item_id: user_events[item_index[item_slots[i]].expect("item slot")],
                    weight: sol.weights[i],
                })
                .collect();
            out.push(Attribution {
                expert_slot: global,
                segment: seg,
                weights: sol.weights,
                top_items,
                residual_norm: sol.residual_norm,
            });
        }
    }
    Ok(out)
}

/// Positions of the `n` largest summed weights across all experts attached
/// to the first segment, ties by position.
pub fn combined_top_positions(attributions: &[Attribution], n: usize) -> Vec<usize> {
    let Some(first) = attributions.first() else { return Vec::new() };
    let mut total = vec![0.0; first.weights.len()];
    for a in attributions.iter().filter(|a| a.segment == first.segment) {
        for (t, w) in total.iter_mut().zip(&a.weights) {
            *t += w;
        }
    }
    let mut order: Vec<usize> = (0..total.len()).filter(|&i| total[i] > 0.0).collect();
    order.sort_by(|&i, &j| total[j].total_cmp(&total[i]).then(i.cmp(&j)));
    order.truncate(n);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::build_plan;
    use crate::tinyformer::test_util::{random_model, small_config};
    use crate::tinyformer::model_fingerprint;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
    }

    /// KKT residual: the largest violation of the optimality conditions.
    fn kkt_violation(p: &Array2<f64>, x: &Array1<f64>, w: &[f64]) -> f64 {
        let w = Array1::from(w.to_vec());
        let r = x - &p.t().dot(&w);
        let g = p.dot(&r); // negative gradient of 0.5 ||P^T w - x||^2
        let mut worst: f64 = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            worst = worst.max(-wi);
            if wi > 0.0 {
                worst = worst.max(g[i].abs());
            } else {
                worst = worst.max(g[i]);
            }
        }
        worst
    }

    #[test]
    fn exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = gaussian(&mut rng, 8, 20);
            let truth: Vec<f64> = (0..8)
                .map(|i| if i % 3 == 0 { 0.0 } else { rng.random_range(0.1..2.0) })
                .collect();
            let x = p.t().dot(&Array1::from(truth.clone()));
            let sol = nnls(&p, x.view(), 1e-8, 1000).unwrap();
            for (a, b) in sol.weights.iter().zip(&truth) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            assert!(sol.residual_norm < 1e-8);
        }
    }

    #[test]
    fn outside_the_cone_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Array2::from_shape_fn((6, 5), |_| rng.random_range(0.0..1.0));
        let x = Array1::from_shape_fn(5, |_| -rng.random_range(0.1..1.0));
        let sol = nnls(&p, x.view(), 1e-8, 100).unwrap();
        assert!(sol.weights.iter().all(|&w| w == 0.0));
        assert!((sol.residual_norm - x.dot(&x).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn column_equal_to_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = gaussian(&mut rng, 4, 6);
        let x = p.row(2).to_owned();
        let sol = nnls(&p, x.view(), 1e-8, 100).unwrap();
        assert!((sol.weights[2] - 1.0).abs() < 1e-10);
        assert!(sol.weights.iter().enumerate().all(|(i, &w)| i == 2 || w.abs() < 1e-10));
        assert!(sol.residual_norm < 1e-10);
    }

    #[test]
    fn iteration_cap_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = gaussian(&mut rng, 10, 12);
        let x = Array1::from_shape_fn(12, |_| rng.random_range(-1.0..1.0));
        assert_eq!(nnls(&p, x.view(), 1e-8, 0).unwrap_err(), LensError::DidNotConverge(0));
        assert!(matches!(nnls(&p, x.slice(ndarray::s![..3]), 1e-8, 10), Err(LensError::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn kkt_holds(seed in 0u64..10_000, items in 1usize..30, d in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = gaussian(&mut rng, items, d);
            let x = Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
            let sol = nnls(&p, x.view(), 1e-8, 10_000).unwrap();
            prop_assert!(kkt_violation(&p, &x, &sol.weights) <= 1e-8);
            prop_assert!(sol.residual_norm >= 0.0);
        }

        #[test]
        fn homogeneous_in_x(seed in 0u64..10_000, c in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = gaussian(&mut rng, 12, 6);
            let x = Array1::from_shape_fn(6, |_| StandardNormal.sample(&mut rng));
            let a = nnls(&p, x.view(), 1e-10, 10_000).unwrap();
            let b = nnls(&p, (&x * c).view(), 1e-10, 10_000).unwrap();
            let scale = a.weights.iter().fold(0.0f64, |m, w| m.max(w.abs())).max(1e-300);
            for (wa, wb) in a.weights.iter().zip(&b.weights) {
                prop_assert!((wa * c - wb).abs() <= 1e-8 * scale * c);
            }
        }
    }

    #[test]
    fn attribution_shapes_and_read_only() {
        let plan = build_plan(&[12, 4], &[4, 0]).unwrap();
        let model = random_model(&small_config(20, plan.flat_len(), 4, 2));
        let before = model_fingerprint(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let events: Vec<u32> = (0..16).map(|_| rng.random_range(0..20)).collect();
        let atts = attribute_experts(&model, &events, &plan, 3).unwrap();
        assert_eq!(atts.len(), 4);
        for (e, a) in atts.iter().enumerate() {
            assert_eq!(a.expert_slot, e);
            assert_eq!(a.weights.len(), 12);
            assert!(a.weights.iter().all(|&w| w >= 0.0));
            assert!(a.top_items.len() <= 3);
            assert!(a.top_items.windows(2).all(|w| w[0].weight >= w[1].weight));
            for t in &a.top_items {
                assert_eq!(t.item_id, events[t.segment_position]);
            }
        }
        let empty = attribute_experts(&model, &events, &plan, 0).unwrap();
        assert!(empty.iter().all(|a| a.top_items.is_empty() && a.residual_norm >= 0.0));
        assert_eq!(model_fingerprint(&model).unwrap(), before);
        let top = combined_top_positions(&atts, 5);
        assert!(top.len() <= 5);

        let none = build_plan(&[12, 4], &[0, 0]).unwrap();
        assert_eq!(attribute_experts(&model, &events, &none, 3).unwrap_err(), LensError::NoExperts);
    }

    #[test]
    fn multi_segment_attribution_uses_own_segment() {
        let plan = build_plan(&[5, 7, 3], &[1, 2, 0]).unwrap();
        let model = random_model(&small_config(20, plan.flat_len(), 3, 7));
        let events: Vec<u32> = (0..15).collect();
        let atts = attribute_experts(&model, &events, &plan, 2).unwrap();
        assert_eq!(atts.iter().map(|a| (a.segment, a.weights.len())).collect::<Vec<_>>(), vec![(0, 5), (1, 7), (1, 7)]);
        for t in &atts[1].top_items {
            assert_eq!(t.item_id, 5 + t.segment_position as u32);
        }
    }
}
