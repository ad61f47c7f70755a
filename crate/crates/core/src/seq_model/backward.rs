//! Hand-derived backward pass for the single-block predictor.

use ndarray::{s, Axis};

use super::{attention_weights, embed, softmax_rows, Matrix, ModelParams};

/// Summed cross-entropy over the targeted positions of one sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TargetLoss {
    pub loss_sum: f64,
    pub count: usize,
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

/// Causal forward pass over `tokens`, then accumulates `weight * dLoss/dθ`
/// into `grads`. `targets[p]` is the token expected after position `p`;
/// positions with `None` contribute nothing.
pub fn sequence_loss_and_grad(
    tokens: &[usize],
    targets: &[Option<usize>],
    params: &ModelParams,
    weight: f64,
    grads: &mut ModelParams,
) -> TargetLoss {
    assert_eq!(tokens.len(), targets.len(), "one target slot per position");
    let dims = params.dims;
    let dk = dims.d_k();
    let len = tokens.len();

    // forward
    let x0 = embed(tokens, params);
    let mut concat = Matrix::zeros((len, dims.heads * dk));
    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let q = x0.dot(&params.w_q[h]);
        let k = x0.dot(&params.w_k[h]);
        let v = x0.dot(&params.w_v[h]);
        let weights = attention_weights(q.view(), k.view(), true);
        concat.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&weights.dot(&v));
        heads.push(HeadCache { q, k, v, weights });
    }
    let h1 = &x0 + &concat.dot(&params.w_o);
    let pre = h1.dot(&params.w_1) + &params.b_1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let h2 = &h1 + &(hidden.dot(&params.w_2) + &params.b_2);
    let probs = softmax_rows(h2.dot(&params.w_out) + &params.b_out);

    // loss and dL/dlogits
    let mut out = TargetLoss::default();
    let mut dlogits = Matrix::zeros(probs.dim());
    for (p, target) in targets.iter().enumerate() {
        if let Some(t) = *target {
            out.loss_sum -= probs[[p, t]].ln();
            out.count += 1;
            let mut row = dlogits.row_mut(p);
            row.assign(&probs.row(p));
            row[t] -= 1.0;
            row *= weight;
        }
    }
    if out.count == 0 {
        return out;
    }

    // output head
    grads.w_out += &h2.t().dot(&dlogits);
    grads.b_out += &dlogits.sum_axis(Axis(0));
    let dh2 = dlogits.dot(&params.w_out.t());

    // feed-forward with residual
    grads.w_2 += &hidden.t().dot(&dh2);
    grads.b_2 += &dh2.sum_axis(Axis(0));
    let mut dpre = dh2.dot(&params.w_2.t());
    dpre.zip_mut_with(&pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    grads.w_1 += &h1.t().dot(&dpre);
    grads.b_1 += &dpre.sum_axis(Axis(0));
    let dh1 = dh2 + dpre.dot(&params.w_1.t());

    // attention with residual
    grads.w_o += &concat.t().dot(&dh1);
    let dconcat = dh1.dot(&params.w_o.t());
    let mut dx0 = dh1;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    for (h, cache) in heads.iter().enumerate() {
        let dout = dconcat.slice(s![.., h * dk..(h + 1) * dk]);
        let dweights = dout.dot(&cache.v.t());
        let dv = cache.weights.t().dot(&dout);
        // softmax backward, row-wise: dS = A * (dA - sum(dA * A))
        let mut dscores = &cache.weights * &dweights;
        let row_dot = dscores.sum_axis(Axis(1));
        for (mut row, (a_row, dot)) in dscores.rows_mut().into_iter().zip(cache.weights.rows().into_iter().zip(row_dot.iter())) {
            row.scaled_add(-dot, &a_row);
        }
        dscores *= inv_sqrt;
        let dq = dscores.dot(&cache.k);
        let dk_mat = dscores.t().dot(&cache.q);
        grads.w_q[h] += &x0.t().dot(&dq);
        grads.w_k[h] += &x0.t().dot(&dk_mat);
        grads.w_v[h] += &x0.t().dot(&dv);
        dx0 += &dq.dot(&params.w_q[h].t());
        dx0 += &dk_mat.dot(&params.w_k[h].t());
        dx0 += &dv.dot(&params.w_v[h].t());
    }

    // embeddings
    let scale = dims.embed_scale();
    for (p, &t) in tokens.iter().enumerate() {
        grads.embedding.row_mut(t).scaled_add(scale, &dx0.row(p));
        let mut pos = grads.positions.row_mut(p);
        pos += &dx0.row(p);
    }
    out
}
