use rand::Rng;

use super::{BenchError, Result};
use crate::encoder::NORM_EPS;
use crate::init;
use crate::numerics::ops::{self, Activation};
use crate::numerics::{Array, Scalar, Tape, Var};

/// Hidden width of the feed-forward part, as a multiple of `D`.
pub const MLP_RATIO: usize = 4;

/// Pre-norm multi-head self-attention followed by a pre-norm MLP, both
/// residual. Projections are `[D, D]`; `fc1 [D, 4D]`, `fc2 [4D, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<H> {
    pub norm1_gamma: H,
    pub norm1_beta: H,
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
    pub norm2_gamma: H,
    pub norm2_beta: H,
    pub fc1_w: H,
    pub fc1_b: H,
    pub fc2_w: H,
    pub fc2_b: H,
}

impl<H> AttentionWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            norm1_gamma: f(&self.norm1_gamma),
            norm1_beta: f(&self.norm1_beta),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            norm2_gamma: f(&self.norm2_gamma),
            norm2_beta: f(&self.norm2_beta),
            fc1_w: f(&self.fc1_w),
            fc1_b: f(&self.fc1_b),
            fc2_w: f(&self.fc2_w),
            fc2_b: f(&self.fc2_b),
        }
    }
}

impl<T: Scalar> AttentionWeights<Array<T>> {
    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> AttentionWeights<Var<'t, T>> {
        self.map(|a| tape.param(a.clone()))
    }

    pub fn constants<'t>(&self, tape: &'t Tape<T>) -> AttentionWeights<Var<'t, T>> {
        self.map(|a| tape.constant(a.clone()))
    }
}

pub fn init_attention<T: Scalar, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> AttentionWeights<Array<T>> {
    let hidden = MLP_RATIO * dim;
    AttentionWeights {
        norm1_gamma: Array::ones(&[dim]),
        norm1_beta: Array::zeros(&[dim]),
        wq: init::linear_weight(dim, dim, rng),
        wk: init::linear_weight(dim, dim, rng),
        wv: init::linear_weight(dim, dim, rng),
        wo: init::linear_weight(dim, dim, rng),
        norm2_gamma: Array::ones(&[dim]),
        norm2_beta: Array::zeros(&[dim]),
        fc1_w: init::linear_weight(dim, hidden, rng),
        fc1_b: Array::zeros(&[hidden]),
        fc2_w: init::linear_weight(hidden, dim, rng),
        fc2_b: Array::zeros(&[dim]),
    }
}

/// Multi-head softmax attention over `h [n, D]`.
///
/// Returns the concatenated head outputs (before `wo`) and each head's
/// `[n, n]` probability matrix.
pub fn self_attention<'t, T: Scalar>(
    h: Var<'t, T>,
    w: &AttentionWeights<Var<'t, T>>,
    heads: usize,
) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
    let d = h.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(BenchError::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = ops::linear(h, w.wq, None)?;
    let k = ops::linear(h, w.wk, None)?;
    let v = ops::linear(h, w.wv, None)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (a, b) = (i * dh, (i + 1) * dh);
        let qh = ops::slice_cols(q, a, b)?;
        let kt = ops::transpose(ops::slice_cols(k, a, b)?)?;
        let vh = ops::slice_cols(v, a, b)?;
        let scores = ops::scale(ops::matmul(qh, kt)?, scale)?;
        let p = ops::activation(scores, Activation::Softmax)?;
        outs.push(ops::matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads == 1 { outs[0] } else { ops::concat_cols(&outs)? };
    Ok((joined, probs))
}

/// One attention block over `tokens [n, D]`; shape is preserved.
pub fn attention_block_forward<'t, T: Scalar>(
    tokens: Var<'t, T>,
    w: &AttentionWeights<Var<'t, T>>,
    heads: usize,
) -> Result<Var<'t, T>> {
    if tokens.shape().len() != 2 {
        return Err(BenchError::Config(format!("tokens must be [n, D], got {:?}", tokens.shape())));
    }
    let h = ops::layer_norm(tokens, w.norm1_gamma, w.norm1_beta, NORM_EPS)?;
    let (attn, _) = self_attention(h, w, heads)?;
    let x = ops::add(tokens, ops::linear(attn, w.wo, None)?)?;
    let h = ops::layer_norm(x, w.norm2_gamma, w.norm2_beta, NORM_EPS)?;
    let h = ops::silu(ops::linear(h, w.fc1_w, Some(w.fc1_b))?)?;
    Ok(ops::add(x, ops::linear(h, w.fc2_w, Some(w.fc2_b))?)?)
}
