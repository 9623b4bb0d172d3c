//! Desk-scale numerics for the fine-tuning side of DDCoT: multi-head
//! cross-attention, the rationale-compressed visual embedding (RCVE), deep
//! layer prompting (DLP) and finite-difference gradient checks.
//!
//! Everything is pure `f64` code over [`Matrix`]; nothing here trains.

pub mod attention;
pub mod dlp;
pub mod gradcheck;
pub mod matrix;
pub mod reference;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{cross_attention, cross_attention_backward, cross_attention_traced, AttentionGrads, AttentionParams, AttentionTrace};
pub use dlp::{dlp_inject, DlpConfig};
pub use gradcheck::{central_difference, grad_check, grad_check_normwise, normwise_error, relative_error};
pub use matrix::{softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RcveError {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch { what: String, expected: String, actual: String },
    #[error("non-finite value in {what}")]
    NonFiniteValue { what: String },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Hidden-layer nonlinearity of the RCVE projector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dimensions of an RCVE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcveDims {
    /// Visual / text feature width `C`.
    pub c: usize,
    /// Text tokens `N_t`.
    pub n_t: usize,
    /// Local visual tokens `N_v`.
    pub n_v: usize,
    /// Low-rank mediator vectors `N_r`.
    pub n_r: usize,
    /// Mediator width `C_r`.
    pub c_r: usize,
    /// Width of both MLP hidden layers.
    pub hidden: usize,
    pub heads: usize,
}

impl RcveDims {
    /// Defaults: hidden width `C`, one head.
    pub fn new(c: usize, n_t: usize, n_v: usize, n_r: usize, c_r: usize) -> Self {
        RcveDims { c, n_t, n_v, n_r, c_r, hidden: c, heads: 1 }
    }

    pub fn validate(&self) -> Result<(), RcveError> {
        let named = [("C", self.c), ("N_t", self.n_t), ("N_v", self.n_v), ("N_r", self.n_r), ("C_r", self.c_r), ("hidden", self.hidden), ("heads", self.heads)];
        if let Some((n, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(RcveError::InvalidConfig(format!("{n} must be at least 1")));
        }
        if self.c % self.heads != 0 {
            return Err(RcveError::InvalidConfig(format!("C={} not divisible by {} heads", self.c, self.heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcveParams {
    pub dims: RcveDims,
    /// Text-conditioned update of the global feature.
    pub attn1: AttentionParams,
    pub mlp: Mlp,
    /// Mediators attend over local features; `W_q` lifts `C_r` to `C`.
    pub attn2: AttentionParams,
}

/// Default init half-width.
pub const INIT_SCALE: f64 = 0.1;

impl RcveParams {
    pub fn random<R: Rng + ?Sized>(dims: RcveDims, scale: f64, rng: &mut R) -> Result<Self, RcveError> {
        dims.validate()?;
        let RcveDims { c, n_r, c_r, hidden, heads, .. } = dims;
        let attn1 = AttentionParams::random(c, c, c, c, heads, scale, rng)?;
        let mlp = Mlp {
            w1: Matrix::random_uniform(c, hidden, scale, rng),
            b1: Matrix::random_uniform(1, hidden, scale, rng),
            w2: Matrix::random_uniform(hidden, hidden, scale, rng),
            b2: Matrix::random_uniform(1, hidden, scale, rng),
            w3: Matrix::random_uniform(hidden, n_r * c_r, scale, rng),
            activation: Activation::Tanh,
        };
        let attn2 = AttentionParams::random(c_r, c, c, c, heads, scale, rng)?;
        let p = RcveParams { dims, attn1, mlp, attn2 };
        p.validate()?;
        Ok(p)
    }

    /// Seeded uniform(−0.1, 0.1) initialization.
    pub fn seeded(dims: RcveDims, seed: u64) -> Result<Self, RcveError> {
        RcveParams::random(dims, INIT_SCALE, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn validate(&self) -> Result<(), RcveError> {
        let d = self.dims;
        d.validate()?;
        self.attn1.validate()?;
        self.attn2.validate()?;
        let expect = |what: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(RcveError::ShapeMismatch { what: what.into(), expected: format!("{:?}", shape), actual: format!("{:?}", m.shape()) })
            }
        };
        expect("attn1.w_q", &self.attn1.w_q, (d.c, self.attn1.width()))?;
        expect("attn1.w_k", &self.attn1.w_k, (d.c, self.attn1.width()))?;
        expect("attn1.w_o", &self.attn1.w_o, (self.attn1.width(), d.c))?;
        expect("mlp.w1", &self.mlp.w1, (d.c, d.hidden))?;
        expect("mlp.b1", &self.mlp.b1, (1, d.hidden))?;
        expect("mlp.w2", &self.mlp.w2, (d.hidden, d.hidden))?;
        expect("mlp.b2", &self.mlp.b2, (1, d.hidden))?;
        expect("mlp.w3", &self.mlp.w3, (d.hidden, d.n_r * d.c_r))?;
        expect("attn2.w_q", &self.attn2.w_q, (d.c_r, self.attn2.width()))?;
        expect("attn2.w_k", &self.attn2.w_k, (d.c, self.attn2.width()))?;
        expect("attn2.w_o", &self.attn2.w_o, (self.attn2.width(), d.c))?;
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::Attn1(p) => p.of(&self.attn1),
            ParamId::Attn2(p) => p.of(&self.attn2),
            ParamId::MlpW1 => &self.mlp.w1,
            ParamId::MlpB1 => &self.mlp.b1,
            ParamId::MlpW2 => &self.mlp.w2,
            ParamId::MlpB2 => &self.mlp.b2,
            ParamId::MlpW3 => &self.mlp.w3,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        match id {
            ParamId::Attn1(p) => p.of_mut(&mut self.attn1),
            ParamId::Attn2(p) => p.of_mut(&mut self.attn2),
            ParamId::MlpW1 => &mut self.mlp.w1,
            ParamId::MlpB1 => &mut self.mlp.b1,
            ParamId::MlpW2 => &mut self.mlp.w2,
            ParamId::MlpB2 => &mut self.mlp.b2,
            ParamId::MlpW3 => &mut self.mlp.w3,
        }
    }

    /// Copy with one parameter replaced; the shape must match.
    pub fn with(&self, id: ParamId, value: &Matrix) -> Result<Self, RcveError> {
        if value.shape() != self.get(id).shape() {
            return Err(RcveError::ShapeMismatch {
                what: id.to_string(),
                expected: format!("{:?}", self.get(id).shape()),
                actual: format!("{:?}", value.shape()),
            });
        }
        let mut p = self.clone();
        *p.get_mut(id) = value.clone();
        Ok(p)
    }

    /// Flat `name -> matrix` view, for fixture pinning.
    pub fn to_named(&self) -> BTreeMap<String, Matrix> {
        ParamId::ALL.iter().map(|id| (id.to_string(), self.get(*id).clone())).collect()
    }

    pub fn from_named(
        dims: RcveDims,
        activation: Activation,
        named: &BTreeMap<String, Matrix>,
    ) -> Result<Self, RcveError> {
        let take = |id: ParamId| {
            named.get(&id.to_string()).cloned().ok_or_else(|| RcveError::InvalidConfig(format!("missing parameter {id}")))
        };
        let attn = |slot: fn(AttnParam) -> ParamId| -> Result<AttentionParams, RcveError> {
            AttentionParams::new(
                take(slot(AttnParam::Wq))?,
                take(slot(AttnParam::Wk))?,
                take(slot(AttnParam::Wv))?,
                take(slot(AttnParam::Wo))?,
                dims.heads,
            )
        };
        let p = RcveParams {
            dims,
            attn1: attn(ParamId::Attn1)?,
            mlp: Mlp {
                w1: take(ParamId::MlpW1)?,
                b1: take(ParamId::MlpB1)?,
                w2: take(ParamId::MlpW2)?,
                b2: take(ParamId::MlpB2)?,
                w3: take(ParamId::MlpW3)?,
                activation,
            },
            attn2: attn(ParamId::Attn2)?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttnParam {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl AttnParam {
    fn of(self, p: &AttentionParams) -> &Matrix {
        match self {
            AttnParam::Wq => &p.w_q,
            AttnParam::Wk => &p.w_k,
            AttnParam::Wv => &p.w_v,
            AttnParam::Wo => &p.w_o,
        }
    }

    fn of_mut(self, p: &mut AttentionParams) -> &mut Matrix {
        match self {
            AttnParam::Wq => &mut p.w_q,
            AttnParam::Wk => &mut p.w_k,
            AttnParam::Wv => &mut p.w_v,
            AttnParam::Wo => &mut p.w_o,
        }
    }

    fn grad(self, g: &AttentionGrads) -> &Matrix {
        match self {
            AttnParam::Wq => &g.w_q,
            AttnParam::Wk => &g.w_k,
            AttnParam::Wv => &g.w_v,
            AttnParam::Wo => &g.w_o,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AttnParam::Wq => "w_q",
            AttnParam::Wk => "w_k",
            AttnParam::Wv => "w_v",
            AttnParam::Wo => "w_o",
        }
    }
}

/// Selects one trainable matrix of [`RcveParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Attn1(AttnParam),
    MlpW1,
    MlpB1,
    MlpW2,
    MlpB2,
    MlpW3,
    Attn2(AttnParam),
}

impl ParamId {
    pub const ALL: [ParamId; 13] = [
        ParamId::Attn1(AttnParam::Wq),
        ParamId::Attn1(AttnParam::Wk),
        ParamId::Attn1(AttnParam::Wv),
        ParamId::Attn1(AttnParam::Wo),
        ParamId::MlpW1,
        ParamId::MlpB1,
        ParamId::MlpW2,
        ParamId::MlpB2,
        ParamId::MlpW3,
        ParamId::Attn2(AttnParam::Wq),
        ParamId::Attn2(AttnParam::Wk),
        ParamId::Attn2(AttnParam::Wv),
        ParamId::Attn2(AttnParam::Wo),
    ];

    pub fn parse(s: &str) -> Option<ParamId> {
        ParamId::ALL.iter().copied().find(|id| id.to_string() == s)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Attn1(p) => write!(f, "attn1.{}", p.name()),
            ParamId::Attn2(p) => write!(f, "attn2.{}", p.name()),
            ParamId::MlpW1 => f.write_str("mlp.w1"),
            ParamId::MlpB1 => f.write_str("mlp.b1"),
            ParamId::MlpW2 => f.write_str("mlp.w2"),
            ParamId::MlpB2 => f.write_str("mlp.b2"),
            ParamId::MlpW3 => f.write_str("mlp.w3"),
        }
    }
}

/// Global feature, text tokens and local visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcveInputs {
    /// `1×C`.
    pub v_g: Matrix,
    /// `N_t×C`.
    pub text: Matrix,
    /// `N_v×C`.
    pub v_l: Matrix,
}

impl RcveInputs {
    pub fn random<R: Rng + ?Sized>(dims: &RcveDims, scale: f64, rng: &mut R) -> Self {
        RcveInputs {
            v_g: Matrix::random_uniform(1, dims.c, scale, rng),
            text: Matrix::random_uniform(dims.n_t, dims.c, scale, rng),
            v_l: Matrix::random_uniform(dims.n_v, dims.c, scale, rng),
        }
    }

    fn check(&self, d: &RcveDims) -> Result<(), RcveError> {
        for (what, m, shape) in [("V_g", &self.v_g, (1, d.c)), ("T", &self.text, (d.n_t, d.c)), ("V_l", &self.v_l, (d.n_v, d.c))] {
            if m.shape() != shape {
                return Err(RcveError::ShapeMismatch { what: what.into(), expected: format!("{:?}", shape), actual: format!("{:?}", m.shape()) });
            }
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct RcveTrace {
    pub attn1: AttentionTrace,
    /// Text-updated global feature, `1×C`.
    pub v_t: Matrix,
    pub z1: Matrix,
    pub a1: Matrix,
    pub z2: Matrix,
    pub a2: Matrix,
    /// Raw projector output, `1×(N_r·C_r)`.
    pub mlp_out: Matrix,
    /// Mediators, `N_r×C_r`.
    pub v_r: Matrix,
    pub attn2: AttentionTrace,
    /// Output, `N_r×C`.
    pub v: Matrix,
}

pub fn rcve_forward_traced(inputs: &RcveInputs, p: &RcveParams) -> Result<RcveTrace, RcveError> {
    p.validate()?;
    inputs.check(&p.dims)?;
    let attn1 = cross_attention_traced(&inputs.v_g, &inputs.text, &p.attn1)?;
    let v_t = attn1.output.clone();
    let act = p.mlp.activation;
    let z1 = v_t.matmul(&p.mlp.w1)?.add_row(&p.mlp.b1)?;
    let a1 = z1.map(|x| act.apply(x));
    let z2 = a1.matmul(&p.mlp.w2)?.add_row(&p.mlp.b2)?;
    let a2 = z2.map(|x| act.apply(x));
    let mlp_out = a2.matmul(&p.mlp.w3)?;
    let v_r = mlp_out.reshape(p.dims.n_r, p.dims.c_r)?;
    let attn2 = cross_attention_traced(&v_r, &inputs.v_l, &p.attn2)?;
    let v = attn2.output.clone();
    if !v.is_finite() {
        return Err(RcveError::NonFiniteValue { what: "rcve output".into() });
    }
    Ok(RcveTrace { attn1, v_t, z1, a1, z2, a2, mlp_out, v_r, attn2, v })
}

/// `V = Attn(reshape(MLP(Attn(V_g, T))), V_l)`, shape `N_r×C`.
pub fn rcve_forward(inputs: &RcveInputs, p: &RcveParams) -> Result<Matrix, RcveError> {
    Ok(rcve_forward_traced(inputs, p)?.v)
}

#[derive(Debug, Clone)]
pub struct RcveGrads {
    pub attn1: AttentionGrads,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub attn2: AttentionGrads,
}

impl RcveGrads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        match id {
            ParamId::Attn1(a) => a.grad(&self.attn1),
            ParamId::Attn2(a) => a.grad(&self.attn2),
            ParamId::MlpW1 => &self.w1,
            ParamId::MlpB1 => &self.b1,
            ParamId::MlpW2 => &self.w2,
            ParamId::MlpB2 => &self.b2,
            ParamId::MlpW3 => &self.w3,
        }
    }
}

/// Backpropagates `d_v = ∂L/∂V` through the whole block.
pub fn rcve_backward(inputs: &RcveInputs, p: &RcveParams, trace: &RcveTrace, d_v: &Matrix) -> Result<RcveGrads, RcveError> {
    let attn2 = cross_attention_backward(&trace.v_r, &inputs.v_l, &p.attn2, &trace.attn2, d_v)?;
    // reshape is row-major, so its adjoint is flatten
    let d_out = attn2.query.flatten();
    let act = p.mlp.activation;
    let w3 = trace.a2.transpose().matmul(&d_out)?;
    let d_a2 = d_out.matmul(&p.mlp.w3.transpose())?;
    let d_z2 = d_a2.zip_map(&trace.z2, |g, z| g * act.derivative(z));
    let w2 = trace.a1.transpose().matmul(&d_z2)?;
    let b2 = d_z2.sum_rows();
    let d_a1 = d_z2.matmul(&p.mlp.w2.transpose())?;
    let d_z1 = d_a1.zip_map(&trace.z1, |g, z| g * act.derivative(z));
    let w1 = trace.v_t.transpose().matmul(&d_z1)?;
    let b1 = d_z1.sum_rows();
    let d_vt = d_z1.matmul(&p.mlp.w1.transpose())?;
    let attn1 = cross_attention_backward(&inputs.v_g, &inputs.text, &p.attn1, &trace.attn1, &d_vt)?;
    Ok(RcveGrads { attn1, w1, b1, w2, b2, w3, attn2 })
}

/// Scalar test loss `Σ V²` and its gradients.
pub fn rcve_sum_squares(inputs: &RcveInputs, p: &RcveParams) -> Result<(f64, RcveGrads), RcveError> {
    let trace = rcve_forward_traced(inputs, p)?;
    let loss = trace.v.sum_squares();
    let d_v = trace.v.scale(2.0);
    let grads = rcve_backward(inputs, p, &trace, &d_v)?;
    Ok((loss, grads))
}

/// Gradient check of `Σ V²` with respect to one parameter.
pub fn rcve_grad_check(inputs: &RcveInputs, p: &RcveParams, id: ParamId, h: f64) -> Result<f64, RcveError> {
    let theta = p.get(id).clone();
    grad_check(
        |t| {
            let q = p.with(id, t)?;
            let (loss, g) = rcve_sum_squares(inputs, &q)?;
            Ok((loss, g.get(id).clone()))
        },
        &theta,
        h,
    )
}
