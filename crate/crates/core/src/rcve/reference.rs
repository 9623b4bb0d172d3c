//! Slow scalar oracles. Written with explicit index loops over nested
//! vectors and no [`Matrix`] arithmetic, so they share no code with the
//! production path beyond reading parameter entries.

use super::attention::AttentionParams;
use super::matrix::Matrix;
use super::{Activation, RcveInputs, RcveParams};

type Rows = Vec<Vec<f64>>;

fn dense(m: &Matrix) -> Rows {
    m.to_rows()
}

fn product(a: &Rows, b: &Rows) -> Rows {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Attention with one scalar loop nest per head and query row.
pub fn attention(query: &Rows, kv: &Rows, p: &AttentionParams) -> Rows {
    let q = product(query, &dense(&p.w_q));
    let k = product(kv, &dense(&p.w_k));
    let v = product(kv, &dense(&p.w_v));
    let d = p.w_q.cols();
    let dh = d / p.heads;
    let n_q = query.len();
    let n_k = kv.len();
    let mut concat = vec![vec![0.0; d]; n_q];
    for h in 0..p.heads {
        let off = h * dh;
        for i in 0..n_q {
            let mut logits = vec![0.0; n_k];
            for j in 0..n_k {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][off + c] * k[j][off + c];
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let mut top = logits[0];
            for &l in &logits {
                if l > top {
                    top = l;
                }
            }
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - top).exp();
                z += *l;
            }
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..n_k {
                    s += logits[j] / z * v[j][off + c];
                }
                concat[i][off + c] = s;
            }
        }
    }
    product(&concat, &dense(&p.w_o))
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

/// Straight-line RCVE forward pass.
pub fn rcve(inputs: &RcveInputs, p: &RcveParams) -> Rows {
    let v_t = attention(&dense(&inputs.v_g), &dense(&inputs.text), &p.attn1);
    let mut x = v_t[0].clone();
    for (w, b) in [(&p.mlp.w1, &p.mlp.b1), (&p.mlp.w2, &p.mlp.b2)] {
        let mut next = vec![0.0; w.cols()];
        for j in 0..w.cols() {
            let mut s = b[(0, j)];
            for i in 0..w.rows() {
                s += x[i] * w[(i, j)];
            }
            next[j] = act(p.mlp.activation, s);
        }
        x = next;
    }
    let w3 = &p.mlp.w3;
    let mut flat = vec![0.0; w3.cols()];
    for j in 0..w3.cols() {
        for i in 0..w3.rows() {
            flat[j] += x[i] * w3[(i, j)];
        }
    }
    let (n_r, c_r) = (p.dims.n_r, p.dims.c_r);
    let mut v_r = vec![vec![0.0; c_r]; n_r];
    for r in 0..n_r {
        for c in 0..c_r {
            v_r[r][c] = flat[r * c_r + c];
        }
    }
    attention(&v_r, &dense(&inputs.v_l), &p.attn2)
}

/// Largest entrywise gap between a matrix and nested rows.
pub fn max_gap(m: &Matrix, rows: &Rows) -> f64 {
    if rows.len() != m.rows() || rows.iter().any(|r| r.len() != m.cols()) {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for (i, r) in rows.iter().enumerate() {
        for (j, x) in r.iter().enumerate() {
            worst = worst.max((m[(i, j)] - x).abs());
        }
    }
    worst
}
