use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};

use super::forward::{dot, gelu_grad, run, Attend, FlopCounter, LayerTape, LogitRows, Token};
use super::{Model, ModelError, Params};
use crate::maskgen::{AttentionMask, LossMask};
use crate::seqcore::TokenLayout;

/// Mean next-item cross-entropy over the included slots and its exact
/// gradient with respect to every parameter.
pub fn loss_and_grads(
    model: &Model,
    layout: &TokenLayout,
    item_ids: &[u32],
    mask: &AttentionMask,
    lmask: &LossMask,
) -> Result<(f64, Params), ModelError> {
    if item_ids.len() != layout.num_items() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} item ids for {} item slots",
            item_ids.len(),
            layout.num_items()
        )));
    }
    if lmask.include.len() != layout.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "loss mask length {} != layout length {}",
            lmask.include.len(),
            layout.len()
        )));
    }
    let item_index = layout.item_index_of();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (p, &inc) in lmask.include.iter().enumerate() {
        if !inc {
            continue;
        }
        let t = layout.target_of[p]
            .filter(|_| layout.slots[p].is_item())
            .ok_or_else(|| ModelError::ShapeMismatch(format!("slot {p} is included but has no target")))?;
        rows.push(p);
        targets.push(item_ids[item_index[t].expect("targets are item slots")] as usize);
    }
    if rows.is_empty() {
        return Err(ModelError::NoIncludedSlots);
    }

    let tokens = Token::from_layout(layout, item_ids);
    let out = run(
        model,
        &tokens,
        0,
        &Attend::Masked(mask),
        LogitRows::Rows(rows.clone()),
        true,
        &mut FlopCounter::default(),
    )?;
    let tape = out.tape.expect("tape recorded");
    let mut dlogits = out.trace.logits;
    let count = rows.len() as f64;
    let mut loss = 0.0;
    for (mut row, &t) in dlogits.rows_mut().into_iter().zip(&targets) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        row.mapv_inplace(|l| (l - lse).exp() / count);
        row[t] -= 1.0 / count;
    }
    loss /= count;

    let p = &model.params;
    let mut g = Params::zeros(&model.config);
    let hf_sel = out.trace.final_hidden.select(Axis(0), &rows);
    general_mat_mul(1.0, &dlogits.t(), &hf_sel, 1.0, &mut g.item_embeddings);
    let dhf_sel = dlogits.dot(&p.item_embeddings);
    let (n, d) = out.trace.final_hidden.dim();
    let mut dhf = Array2::<f64>::zeros((n, d));
    for (r, &pos) in rows.iter().enumerate() {
        dhf.row_mut(pos).assign(&dhf_sel.row(r));
    }

    let mut dx = rms_backward(&tape.x_out, &tape.inv_f, &p.final_norm, &dhf, &mut g.final_norm);
    for (li, lt) in tape.layers.iter().enumerate().rev() {
        dx = layer_backward(model, li, lt, dx, &mut g);
    }

    for (pos, tok) in tokens.iter().enumerate() {
        let row = dx.row(pos);
        match *tok {
            Token::Item(id) => {
                let mut dst = g.item_embeddings.row_mut(id as usize);
                dst += &row;
            }
            Token::Expert(e) => {
                let mut dst = g.expert_embeddings.row_mut(e);
                dst += &row;
            }
        }
        let mut dst = g.position_embeddings.row_mut(pos);
        dst += &row;
    }
    Ok((loss, g))
}

fn rms_backward(
    x: &Array2<f64>,
    inv: &[f64],
    gain: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    for (i, ((xr, dyr), mut dxr)) in x
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut())
        .enumerate()
    {
        let r = inv[i];
        let mut s = 0.0;
        for k in 0..xr.len() {
            dgain[k] += dyr[k] * xr[k] * r;
            s += dyr[k] * gain[k] * xr[k];
        }
        let c = r * r * r * s / d;
        for k in 0..xr.len() {
            dxr[k] = r * dyr[k] * gain[k] - xr[k] * c;
        }
    }
    dx
}

fn layer_backward(model: &Model, li: usize, lt: &LayerTape, dx_out: Array2<f64>, g: &mut Params) -> Array2<f64> {
    let lp = &model.params.layers[li];
    let gl = &mut g.layers[li];

    // FFN branch
    let mut du = dx_out.dot(&lp.w2.t());
    general_mat_mul(1.0, &lt.act.t(), &dx_out, 1.0, &mut gl.w2);
    Zip::from(&mut du).and(&lt.u).for_each(|d, &u| *d *= gelu_grad(u));
    general_mat_mul(1.0, &lt.h2.t(), &du, 1.0, &mut gl.w1);
    let dh2 = du.dot(&lp.w1.t());
    let dx_mid = dx_out + rms_backward(&lt.x_mid, &lt.inv2, &lp.ffn_norm, &dh2, &mut gl.ffn_norm);

    // attention branch
    let dctx = dx_mid.dot(&lp.wo.t());
    general_mat_mul(1.0, &lt.ctx.t(), &dx_mid, 1.0, &mut gl.wo);
    let (dq, dk, dv) = attention_backward(lt, &dctx, model.config.num_heads);
    general_mat_mul(1.0, &lt.h1.t(), &dq, 1.0, &mut gl.wq);
    general_mat_mul(1.0, &lt.h1.t(), &dk, 1.0, &mut gl.wk);
    general_mat_mul(1.0, &lt.h1.t(), &dv, 1.0, &mut gl.wv);
    let mut dh1 = dq.dot(&lp.wq.t());
    general_mat_mul(1.0, &dk, &lp.wk.t(), 1.0, &mut dh1);
    general_mat_mul(1.0, &dv, &lp.wv.t(), 1.0, &mut dh1);
    dx_mid + rms_backward(&lt.x_in, &lt.inv1, &lp.attn_norm, &dh1, &mut gl.attn_norm)
}

fn attention_backward(lt: &LayerTape, dctx: &Array2<f64>, heads: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (n, d) = lt.q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    let (qs, ks, vs) = (
        lt.q.as_slice().unwrap(),
        lt.k.as_slice().unwrap(),
        lt.v.as_slice().unwrap(),
    );
    let dcs = dctx.as_slice().unwrap();
    let (dqs, dks, dvs) = (
        dq.as_slice_mut().unwrap(),
        dk.as_slice_mut().unwrap(),
        dv.as_slice_mut().unwrap(),
    );
    let mut ds = vec![0.0; n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let a = &lt.probs[(h * n + i) * n..(h * n + i) * n + n];
            let dci = &dcs[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..=i {
                if a[j] == 0.0 {
                    ds[j] = 0.0;
                    continue;
                }
                let vj = &vs[j * d + off..j * d + off + dh];
                let da = dot(dci, vj);
                ds[j] = da;
                weighted += a[j] * da;
                dvs[j * d + off..j * d + off + dh]
                    .iter_mut()
                    .zip(dci)
                    .for_each(|(x, c)| *x += a[j] * c);
            }
            let qi = &qs[i * d + off..i * d + off + dh];
            for j in 0..=i {
                if a[j] == 0.0 {
                    continue;
                }
                let s = a[j] * (ds[j] - weighted) * scale;
                let kj = &ks[j * d + off..j * d + off + dh];
                dqs[i * d + off..i * d + off + dh]
                    .iter_mut()
                    .zip(kj)
                    .for_each(|(x, k)| *x += s * k);
                dks[j * d + off..j * d + off + dh]
                    .iter_mut()
                    .zip(qi)
                    .for_each(|(x, q)| *x += s * q);
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{loss_mask, segmented_mask};
    use crate::seqcore::build_plan;
    use crate::tinyformer::test_util::{random_model, small_config};
    use crate::tinyformer::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = small_config(9, 10, 1, 1);
        let mut model = init_model(&cfg).unwrap();
        model.params.item_embeddings.fill(0.0);
        let plan = build_plan(&[4, 3], &[1, 0]).unwrap();
        let layout = TokenLayout::from_plan(&plan);
        let (loss, _) = loss_and_grads(
            &model,
            &layout,
            &[0, 1, 2, 3, 4, 5, 6],
            &segmented_mask(&plan),
            &loss_mask(&layout),
        )
        .unwrap();
        assert!((loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_loss_mask_errors() {
        let model = random_model(&small_config(9, 10, 1, 1));
        let plan = build_plan(&[3], &[0]).unwrap();
        let layout = TokenLayout::from_plan(&plan);
        let lm = LossMask { include: vec![false; 3] };
        assert_eq!(
            loss_and_grads(&model, &layout, &[1, 2, 3], &segmented_mask(&plan), &lm).unwrap_err(),
            ModelError::NoIncludedSlots
        );
    }

    /// Central differences on randomly chosen entries of every parameter family.
    #[test]
    fn gradients_match_finite_differences() {
        let plan = build_plan(&[5, 4, 3], &[2, 1, 0]).unwrap();
        let cfg = small_config(11, plan.flat_len() + 2, 3, 6);
        let model = random_model(&cfg);
        let layout = TokenLayout::from_plan(&plan);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<u32> = (0..plan.total_items()).map(|_| rng.random_range(0..11)).collect();
        let mask = segmented_mask(&plan);
        let lm = loss_mask(&layout);
        let (_, grads) = loss_and_grads(&model, &layout, &ids, &mask, &lm).unwrap();

        let loss_at = |m: &Model| loss_and_grads(m, &layout, &ids, &mask, &lm).unwrap().0;
        let h = 1e-5;
        let tensor_count = grads.tensors().len();
        for t in 0..tensor_count {
            let len = grads.tensors()[t].len();
            for _ in 0..4 {
                let idx = rng.random_range(0..len);
                let mut plus = model.clone();
                plus.params.tensors_mut()[t][idx] += h;
                let mut minus = model.clone();
                minus.params.tensors_mut()[t][idx] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let an = grads.tensors()[t][idx];
                let rel = (an - fd).abs() / (an.abs() + 1e-6);
                assert!(rel < 1e-4, "tensor {t} idx {idx}: analytic {an} fd {fd}");
            }
        }
        assert!(grads.all_finite());
    }
}
