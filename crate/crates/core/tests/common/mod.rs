//! Test-side oracles and helpers, written independently of the library's
//! own matrix code.
#![allow(dead_code)]

use ddcot_core::rcve::{Activation, AttentionParams, Matrix, RcveInputs, RcveParams};

pub type Rows = Vec<Vec<f64>>;

/// `x[i] · W[:, col]`.
fn project(x: &[f64], w: &Matrix, col: usize) -> f64 {
    (0..x.len()).map(|t| x[t] * w[(t, col)]).sum()
}

/// Multi-head scaled dot-product attention, one output element at a time.
pub fn attention(query: &Rows, kv: &Rows, p: &AttentionParams) -> Rows {
    let d = p.w_q.cols();
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = vec![vec![0.0; d]; query.len()];
    for (i, q_row) in query.iter().enumerate() {
        for h in 0..heads {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let q: Vec<f64> = cols.iter().map(|&c| project(q_row, &p.w_q, c)).collect();
            let logits: Vec<f64> = kv
                .iter()
                .map(|k_row| cols.iter().zip(&q).map(|(&c, qc)| qc * project(k_row, &p.w_k, c)).sum::<f64>() * scale)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for &c in &cols {
                concat[i][c] = kv.iter().zip(&weights).map(|(row, w)| w / z * project(row, &p.w_v, c)).sum();
            }
        }
    }
    concat
        .iter()
        .map(|row| (0..p.w_o.cols()).map(|j| project(row, &p.w_o, j)).collect())
        .collect()
}

fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

/// Global feature attends to text, a three-layer MLP expands it into
/// `N_r` mediator rows, which attend to the local features.
pub fn rcve(x: &RcveInputs, p: &RcveParams) -> Rows {
    let v_t = attention(&x.v_g.to_rows(), &x.text.to_rows(), &p.attn1).remove(0);
    let m = &p.mlp;
    let h1: Vec<f64> = (0..m.w1.cols()).map(|j| activate(m.activation, project(&v_t, &m.w1, j) + m.b1[(0, j)])).collect();
    let h2: Vec<f64> = (0..m.w2.cols()).map(|j| activate(m.activation, project(&h1, &m.w2, j) + m.b2[(0, j)])).collect();
    let flat: Vec<f64> = (0..m.w3.cols()).map(|j| project(&h2, &m.w3, j)).collect();
    let c_r = p.dims.c_r;
    let v_r: Rows = flat.chunks(c_r).map(|c| c.to_vec()).collect();
    attention(&v_r, &x.v_l.to_rows(), &p.attn2)
}

pub fn max_gap(m: &Matrix, rows: &Rows) -> f64 {
    assert_eq!((m.rows(), m.cols()), (rows.len(), rows.first().map_or(0, Vec::len)), "shape");
    let mut worst = 0.0_f64;
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            worst = worst.max((m[(i, j)] - v).abs());
        }
    }
    worst
}

/// Central differences of `f` at `theta`, entry by entry.
pub fn numeric_gradient(f: impl Fn(&Matrix) -> f64, theta: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(theta.rows(), theta.cols());
    let mut t = theta.clone();
    for i in 0..theta.rows() {
        for j in 0..theta.cols() {
            let x = theta[(i, j)];
            t[(i, j)] = x + h;
            let up = f(&t);
            t[(i, j)] = x - h;
            let down = f(&t);
            t[(i, j)] = x;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

pub fn max_relative_error(a: &Matrix, n: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(n.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn normwise_relative_error(a: &Matrix, n: &Matrix) -> f64 {
    let norm = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a.as_slice().iter().zip(n.as_slice()).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(n)).max(1e-8)
}

pub fn fixture(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}
