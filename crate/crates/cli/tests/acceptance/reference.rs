//! Plain dense-matrix forward pass of the classifier, written against
//! nalgebra and sharing no code with the library's tensor or layer paths.
//! Finite differences of these functions are the derivative oracle.

use nalgebra::DMatrix;
use tangent_core::model::BlockParams;
use tangent_core::{BaseWeights, ModelConfig, Tensor};

pub type M = DMatrix<f64>;

/// Matrix view of a tensor; rank-1 tensors become columns.
pub fn mat(t: &Tensor) -> M {
    match t.shape() {
        [r, c] => M::from_row_slice(*r, *c, t.data()),
        [n] => M::from_column_slice(*n, 1, t.data()),
        s => panic!("unsupported shape {s:?}"),
    }
}

pub fn rel(a: &M, b: &M, floor: f64) -> f64 {
    let num = (a - b).abs().max();
    num / b.abs().max().max(floor)
}

pub fn linear(x: &M, w: &M, b: &M) -> M {
    let mut y = w * x;
    for mut col in y.column_iter_mut() {
        col += b.column(0);
    }
    y
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn layernorm(x: &M, gamma: &M, beta: &M, eps: f64) -> M {
    let d = x.nrows() as f64;
    let mut y = x.clone();
    for mut col in y.column_iter_mut() {
        let mean = col.sum() / d;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let s = (var + eps).sqrt();
        for (i, v) in col.iter_mut().enumerate() {
            *v = gamma[i] * (*v - mean) / s + beta[i];
        }
    }
    y
}

/// Heads split the feature rows; each head attends with scale `1/sqrt(d_h)`.
pub fn attention(x: &M, wq: &M, wk: &M, wv: &M, heads: usize) -> M {
    let (d, n) = x.shape();
    let dh = d / heads;
    let (q, k, v) = (wq * x, wk * x, wv * x);
    let mut out = M::zeros(d, n);
    for h in 0..heads {
        let r = h * dh;
        let qh = q.rows(r, dh);
        let kh = k.rows(r, dh);
        let mut scores = qh.transpose() * kh / (dh as f64).sqrt();
        for mut row in scores.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let total = row.sum();
            row /= total;
        }
        out.rows_mut(r, dh).copy_from(&(v.rows(r, dh) * scores.transpose()));
    }
    out
}

pub fn block(x: &M, p: &BlockParams) -> M {
    let n1 = layernorm(x, &mat(&p.ln1.gamma), &mat(&p.ln1.beta), p.ln1.eps);
    let a = attention(&n1, &mat(&p.attn.w_q), &mat(&p.attn.w_k), &mat(&p.attn.w_v), p.attn.heads);
    let h = x + linear(&a, &mat(&p.proj.w), &mat(&p.proj.b));
    let n2 = layernorm(&h, &mat(&p.ln2.gamma), &mat(&p.ln2.beta), p.ln2.eps);
    let u = linear(&n2, &mat(&p.fc1.w), &mat(&p.fc1.b)).map(gelu);
    &h + linear(&u, &mat(&p.fc2.w), &mat(&p.fc2.b))
}

/// Class scores for input `x` (`n_features x n_tokens`): CLS column in
/// front of the embedded tokens, positions added, the tail CLS substituted
/// in front of the first tunable block, and the head read off the CLS column.
pub fn classifier(cfg: &ModelConfig, w: &BaseWeights, x: &Tensor) -> M {
    let tokens = linear(&mat(x), &mat(&w.embed.w), &mat(&w.embed.b));
    let mut h = M::zeros(cfg.d_model, cfg.n_tokens + 1);
    h.column_mut(0).copy_from(&mat(&w.cls_token).column(0));
    h.columns_mut(1, cfg.n_tokens).copy_from(&tokens);
    h += mat(&w.pos);
    let first = cfg.depth - cfg.tunable_blocks;
    for (i, p) in w.blocks.iter().enumerate() {
        if i == first {
            if let Some(c) = &w.tail_cls {
                h.column_mut(0).copy_from(&mat(c).column(0));
            }
        }
        h = block(&h, p);
    }
    let cls = h.columns(0, 1).into_owned();
    let z = layernorm(&cls, &mat(&w.final_norm.gamma), &mat(&w.final_norm.beta), w.final_norm.eps);
    linear(&z, &mat(&w.head.w), &mat(&w.head.b))
}

/// `(f(+h) − f(−h)) / 2h`.
pub fn central(f: impl Fn(f64) -> M, h: f64) -> M {
    (f(h) - f(-h)) / (2.0 * h)
}
