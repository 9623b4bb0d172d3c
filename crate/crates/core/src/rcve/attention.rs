use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{softmax_rows, Matrix};
use super::RcveError;

/// Projections of a multi-head cross-attention block: `W_q: d_q×d`,
/// `W_k, W_v: d_kv×d`, `W_o: d×d_out`, with `d` divisible by `heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub heads: usize,
}

fn mismatch(what: &str, expected: impl ToString, actual: impl ToString) -> RcveError {
    RcveError::ShapeMismatch { what: what.into(), expected: expected.to_string(), actual: actual.to_string() }
}

impl AttentionParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix, heads: usize) -> Result<Self, RcveError> {
        let p = AttentionParams { w_q, w_k, w_v, w_o, heads };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RcveError> {
        let d = self.w_q.cols();
        if self.w_k.cols() != d || self.w_v.cols() != d {
            return Err(mismatch("attention width", format!("W_k, W_v with {d} columns"), format!("{} and {}", self.w_k.cols(), self.w_v.cols())));
        }
        if self.w_k.rows() != self.w_v.rows() {
            return Err(mismatch("key/value input dim", self.w_k.rows(), self.w_v.rows()));
        }
        if self.w_o.rows() != d {
            return Err(mismatch("W_o rows", d, self.w_o.rows()));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(RcveError::InvalidConfig(format!("width {d} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// Seeded uniform(−scale, scale) initialization.
    pub fn random<R: Rng + ?Sized>(
        d_q: usize,
        d_kv: usize,
        d: usize,
        d_out: usize,
        heads: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, RcveError> {
        AttentionParams::new(
            Matrix::random_uniform(d_q, d, scale, rng),
            Matrix::random_uniform(d_kv, d, scale, rng),
            Matrix::random_uniform(d_kv, d, scale, rng),
            Matrix::random_uniform(d, d_out, scale, rng),
            heads,
        )
    }

    /// Every projection is the `d×d` identity.
    pub fn identity(d: usize, heads: usize) -> Result<Self, RcveError> {
        let i = Matrix::identity(d);
        AttentionParams::new(i.clone(), i.clone(), i.clone(), i, heads)
    }

    pub fn width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn query_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn kv_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_o.cols()
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights, one `n_q×n_k` matrix per head.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs before `W_o`.
    pub concat: Matrix,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub query: Matrix,
    pub keys_values: Matrix,
}

fn check_inputs(query: &Matrix, kv: &Matrix, p: &AttentionParams) -> Result<(), RcveError> {
    p.validate()?;
    if query.cols() != p.query_dim() {
        return Err(mismatch("query width", p.query_dim(), query.cols()));
    }
    if kv.cols() != p.kv_dim() {
        return Err(mismatch("key/value width", p.kv_dim(), kv.cols()));
    }
    Ok(())
}

/// `concat_h softmax(Q_h K_hᵀ / √(d/h)) V_h · W_o`.
pub fn cross_attention_traced(query: &Matrix, keys_values: &Matrix, p: &AttentionParams) -> Result<AttentionTrace, RcveError> {
    check_inputs(query, keys_values, p)?;
    let q = query.matmul(&p.w_q)?;
    let k = keys_values.matmul(&p.w_k)?;
    let v = keys_values.matmul(&p.w_v)?;
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(query.rows(), p.width());
    let mut probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = (q.columns(h * dh, dh), k.columns(h * dh, dh), v.columns(h * dh, dh));
        let a = softmax_rows(&qh.matmul(&kh.transpose())?.scale(scale));
        concat.set_columns(h * dh, &a.matmul(&vh)?);
        probs.push(a);
    }
    let output = concat.matmul(&p.w_o)?;
    Ok(AttentionTrace { q, k, v, probs, concat, output })
}

pub fn cross_attention(query: &Matrix, keys_values: &Matrix, p: &AttentionParams) -> Result<Matrix, RcveError> {
    Ok(cross_attention_traced(query, keys_values, p)?.output)
}

/// Reverse-mode gradients given `d_out = ∂L/∂output`.
pub fn cross_attention_backward(
    query: &Matrix,
    keys_values: &Matrix,
    p: &AttentionParams,
    trace: &AttentionTrace,
    d_out: &Matrix,
) -> Result<AttentionGrads, RcveError> {
    if d_out.shape() != trace.output.shape() {
        return Err(mismatch("output gradient", format!("{:?}", trace.output.shape()), format!("{:?}", d_out.shape())));
    }
    let w_o = trace.concat.transpose().matmul(d_out)?;
    let d_concat = d_out.matmul(&p.w_o.transpose())?;
    let dh = p.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = Matrix::zeros(trace.q.rows(), p.width());
    let mut dk = Matrix::zeros(trace.k.rows(), p.width());
    let mut dv = Matrix::zeros(trace.v.rows(), p.width());
    for (h, a) in trace.probs.iter().enumerate() {
        let qh = trace.q.columns(h * dh, dh);
        let kh = trace.k.columns(h * dh, dh);
        let vh = trace.v.columns(h * dh, dh);
        let d_head = d_concat.columns(h * dh, dh);

        let d_a = d_head.matmul(&vh.transpose())?;
        dv.set_columns(h * dh, &a.transpose().matmul(&d_head)?);
        // softmax Jacobian, row by row: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let mut d_s = Matrix::zeros(a.rows(), a.cols());
        for i in 0..a.rows() {
            let dot: f64 = a.row(i).iter().zip(d_a.row(i)).map(|(x, y)| x * y).sum();
            for j in 0..a.cols() {
                d_s[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot) * scale;
            }
        }
        dq.set_columns(h * dh, &d_s.matmul(&kh)?);
        dk.set_columns(h * dh, &d_s.transpose().matmul(&qh)?);
    }

    let w_q = query.transpose().matmul(&dq)?;
    let w_k = keys_values.transpose().matmul(&dk)?;
    let w_v = keys_values.transpose().matmul(&dv)?;
    let d_query = dq.matmul(&p.w_q.transpose())?;
    let mut d_kv = dk.matmul(&p.w_k.transpose())?;
    d_kv.add_assign(&dv.matmul(&p.w_v.transpose())?);
    Ok(AttentionGrads { w_q, w_k, w_v, w_o, query: d_query, keys_values: d_kv })
}
