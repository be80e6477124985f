//! Audio Mamba encoder: bidirectional selective-SSM blocks over patch
//! tokens with a class token, positional embeddings and a linear head.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{forward_patches, init_weights, model_forward, patch_input, Model, ModelConfig, ModelWeights};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureError;
use crate::init;
use crate::numerics::ops;
use crate::numerics::{Array, NumericsError, Scalar, Var};
use crate::ssm::{self, ScanDirection, SsmParams};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Features(#[from] FeatureError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

pub const NORM_EPS: f64 = 1e-5;

/// Scan layout of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockVariant {
    /// Forward scan only.
    FoFo,
    /// Forward and backward SSMs sharing one causal convolution.
    FoBi,
    /// Forward and backward SSMs, each behind its own convolution.
    BiBi,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 3] = [BlockVariant::FoFo, BlockVariant::FoBi, BlockVariant::BiBi];

    pub fn has_backward_ssm(self) -> bool {
        self != BlockVariant::FoFo
    }

    pub fn has_backward_conv(self) -> bool {
        self == BlockVariant::BiBi
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockVariant::FoFo => "FoFo",
            BlockVariant::FoBi => "FoBi",
            BlockVariant::BiBi => "BiBi",
        })
    }
}

impl FromStr for BlockVariant {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "fofo" => Ok(BlockVariant::FoFo),
            "fobi" => Ok(BlockVariant::FoBi),
            "bibi" => Ok(BlockVariant::BiBi),
            _ => Err(EncoderError::Config(format!("unknown block variant {s:?}"))),
        }
    }
}

/// Where the class token is inserted among the patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClsPosition {
    Head,
    Mid,
    End,
}

impl ClsPosition {
    pub const ALL: [ClsPosition; 3] = [ClsPosition::Head, ClsPosition::Mid, ClsPosition::End];

    /// Insertion index for `num_patches` patch tokens.
    pub fn index(self, num_patches: usize) -> usize {
        match self {
            ClsPosition::Head => 0,
            ClsPosition::Mid => num_patches / 2,
            ClsPosition::End => num_patches,
        }
    }
}

impl fmt::Display for ClsPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsPosition::Head => "Head",
            ClsPosition::Mid => "Mid",
            ClsPosition::End => "End",
        })
    }
}

impl FromStr for ClsPosition {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(ClsPosition::Head),
            "mid" => Ok(ClsPosition::Mid),
            "end" => Ok(ClsPosition::End),
            _ => Err(EncoderError::Config(format!("unknown class-token position {s:?}"))),
        }
    }
}

/// Depthwise causal convolution: `kernel [K, width]`, `bias [width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<H> {
    pub kernel: H,
    pub bias: H,
}

impl<H> ConvWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> ConvWeights<U> {
        ConvWeights {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }
}

/// One block. With model width `D` and inner width `E*D`:
/// `in_proj [D, 2ED]`, `out_proj [ED, D]`, convolutions and SSMs over `ED`
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AumBlockWeights<H> {
    pub norm_gamma: H,
    pub norm_beta: H,
    pub in_proj: H,
    pub conv_fwd: ConvWeights<H>,
    /// Present for BiBi only.
    pub conv_bwd: Option<ConvWeights<H>>,
    pub ssm_fwd: SsmParams<H>,
    /// Present for FoBi and BiBi.
    pub ssm_bwd: Option<SsmParams<H>>,
    pub out_proj: H,
}

impl<H> AumBlockWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> AumBlockWeights<U> {
        AumBlockWeights {
            norm_gamma: f(&self.norm_gamma),
            norm_beta: f(&self.norm_beta),
            in_proj: f(&self.in_proj),
            conv_fwd: self.conv_fwd.map(&mut f),
            conv_bwd: self.conv_bwd.as_ref().map(|c| c.map(&mut f)),
            ssm_fwd: self.ssm_fwd.map(&mut f),
            ssm_bwd: self.ssm_bwd.as_ref().map(|s| s.map(&mut f)),
            out_proj: f(&self.out_proj),
        }
    }

    /// Every tensor with a dotted name, in the same order as [`Self::map`].
    pub fn named(&self) -> Vec<(String, &H)> {
        let mut out = vec![
            ("norm.gamma".to_string(), &self.norm_gamma),
            ("norm.beta".to_string(), &self.norm_beta),
            ("in_proj".to_string(), &self.in_proj),
            ("conv_fwd.kernel".to_string(), &self.conv_fwd.kernel),
            ("conv_fwd.bias".to_string(), &self.conv_fwd.bias),
        ];
        if let Some(c) = &self.conv_bwd {
            out.push(("conv_bwd.kernel".into(), &c.kernel));
            out.push(("conv_bwd.bias".into(), &c.bias));
        }
        out.extend(self.ssm_fwd.named().into_iter().map(|(n, h)| (format!("ssm_fwd.{n}"), h)));
        if let Some(s) = &self.ssm_bwd {
            out.extend(s.named().into_iter().map(|(n, h)| (format!("ssm_bwd.{n}"), h)));
        }
        out.push(("out_proj".into(), &self.out_proj));
        out
    }

    /// Mutable tensors in [`Self::named`] order.
    pub fn params_mut(&mut self) -> Vec<&mut H> {
        let mut out = vec![
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.in_proj,
            &mut self.conv_fwd.kernel,
            &mut self.conv_fwd.bias,
        ];
        if let Some(c) = &mut self.conv_bwd {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        out.extend(self.ssm_fwd.params_mut());
        if let Some(s) = &mut self.ssm_bwd {
            out.extend(s.params_mut());
        }
        out.push(&mut self.out_proj);
        out
    }

    /// Fails unless the optional parts match `variant`.
    pub fn check_variant(&self, variant: BlockVariant) -> Result<()> {
        if self.ssm_bwd.is_some() != variant.has_backward_ssm() {
            return Err(EncoderError::Config(format!(
                "{variant} block {} backward SSM parameters",
                if self.ssm_bwd.is_some() { "was given" } else { "is missing" }
            )));
        }
        if self.conv_bwd.is_some() != variant.has_backward_conv() {
            return Err(EncoderError::Config(format!(
                "{variant} block {} a backward convolution",
                if self.conv_bwd.is_some() { "was given" } else { "is missing" }
            )));
        }
        Ok(())
    }
}

/// Width settings shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub embed_dim: usize,
    pub expand: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
}

impl BlockDims {
    pub fn inner(&self) -> usize {
        self.expand * self.embed_dim
    }
}

fn conv_init<T: Scalar, R: Rng + ?Sized>(k: usize, width: usize, rng: &mut R) -> ConvWeights<Array<T>> {
    let bound = 1.0 / (k as f64).sqrt();
    ConvWeights {
        kernel: init::uniform(&[k, width], bound, rng),
        bias: init::uniform(&[width], bound, rng),
    }
}

/// Randomly initialized block weights for `variant`.
pub fn init_block<T: Scalar, R: Rng + ?Sized>(
    dims: BlockDims,
    variant: BlockVariant,
    rng: &mut R,
) -> AumBlockWeights<Array<T>> {
    let (d, inner) = (dims.embed_dim, dims.inner());
    AumBlockWeights {
        norm_gamma: Array::ones(&[d]),
        norm_beta: Array::zeros(&[d]),
        in_proj: init::linear_weight(d, 2 * inner, rng),
        conv_fwd: conv_init(dims.conv_kernel, inner, rng),
        conv_bwd: variant
            .has_backward_conv()
            .then(|| conv_init(dims.conv_kernel, inner, rng)),
        ssm_fwd: ssm::init_params(inner, dims.state_dim, rng),
        ssm_bwd: variant
            .has_backward_ssm()
            .then(|| ssm::init_params(inner, dims.state_dim, rng)),
        out_proj: init::linear_weight(inner, d, rng),
    }
}

/// Tokens of one clip with the class token's recorded position.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence<'t, T: Scalar> {
    /// `[num_patches + 1, D]`
    pub tokens: Var<'t, T>,
    pub cls_index: usize,
}

impl<T: Scalar> TokenSequence<'_, T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inserts `cls [D]` among the patch embeddings `[N, D]`.
pub fn insert_cls_token<'t, T: Scalar>(
    emb: Var<'t, T>,
    cls: Var<'t, T>,
    pos: ClsPosition,
) -> Result<TokenSequence<'t, T>> {
    let shape = emb.shape();
    if shape.len() != 2 {
        return Err(EncoderError::Shape(format!("patch embeddings must be [N, D], got {shape:?}")));
    }
    let cls_index = pos.index(shape[0]);
    Ok(TokenSequence {
        tokens: ops::insert_row(emb, cls, cls_index)?,
        cls_index,
    })
}

/// Adds learnable positional embeddings `[N+1, D]`.
pub fn add_positional<'t, T: Scalar>(ts: TokenSequence<'t, T>, pos: Var<'t, T>) -> Result<TokenSequence<'t, T>> {
    let (a, b) = (ts.tokens.shape(), pos.shape());
    if a != b {
        return Err(EncoderError::Shape(format!(
            "positional embeddings {b:?} do not match tokens {a:?}"
        )));
    }
    Ok(TokenSequence {
        tokens: ops::add(ts.tokens, pos)?,
        cls_index: ts.cls_index,
    })
}

fn conv_silu<'t, T: Scalar>(x: Var<'t, T>, c: &ConvWeights<Var<'t, T>>) -> Result<Var<'t, T>> {
    Ok(ops::silu(ops::depthwise_conv1d(x, c.kernel, Some(c.bias))?)?)
}

/// Residual block: pre-norm, input projection into a main branch and a
/// gate, per-variant convolution and scans, gating, output projection.
pub fn block_forward<'t, T: Scalar>(
    ts: TokenSequence<'t, T>,
    w: &AumBlockWeights<Var<'t, T>>,
    variant: BlockVariant,
) -> Result<TokenSequence<'t, T>> {
    w.check_variant(variant)?;
    let input = ts.tokens;
    let d = input.shape()[1];
    let in_shape = w.in_proj.shape();
    if in_shape.len() != 2 || in_shape[0] != d || in_shape[1] % 2 != 0 {
        return Err(EncoderError::Shape(format!(
            "in_proj {in_shape:?} does not fit tokens of width {d}"
        )));
    }
    let inner = in_shape[1] / 2;
    let normed = ops::layer_norm(input, w.norm_gamma, w.norm_beta, NORM_EPS)?;
    let xz = ops::linear(normed, w.in_proj, None)?;
    let x_main = ops::slice_cols(xz, 0, inner)?;
    let gate = ops::silu(ops::slice_cols(xz, inner, 2 * inner)?)?;

    let u = conv_silu(x_main, &w.conv_fwd)?;
    let forward = ssm::ssm_forward(u, &w.ssm_fwd, ScanDirection::Forward)?;
    let merged = match variant {
        BlockVariant::FoFo => forward,
        BlockVariant::FoBi => {
            let p = w.ssm_bwd.as_ref().expect("checked");
            ops::add(forward, ssm::ssm_forward(u, p, ScanDirection::Backward)?)?
        }
        BlockVariant::BiBi => {
            let c = w.conv_bwd.as_ref().expect("checked");
            let p = w.ssm_bwd.as_ref().expect("checked");
            let ub = ops::reverse_rows(conv_silu(ops::reverse_rows(x_main)?, c)?)?;
            ops::add(forward, ssm::ssm_forward(ub, p, ScanDirection::Backward)?)?
        }
    };
    let out = ops::linear(ops::mul(merged, gate)?, w.out_proj, None)?;
    Ok(TokenSequence {
        tokens: ops::add(input, out)?,
        cls_index: ts.cls_index,
    })
}

/// Blocks in sequence, then the final layer norm.
pub fn encoder_forward<'t, T: Scalar>(
    ts: TokenSequence<'t, T>,
    blocks: &[AumBlockWeights<Var<'t, T>>],
    final_norm: (Var<'t, T>, Var<'t, T>),
    variant: BlockVariant,
) -> Result<TokenSequence<'t, T>> {
    if blocks.is_empty() {
        return Err(EncoderError::Config("encoder needs at least one block".into()));
    }
    let mut ts = ts;
    for b in blocks {
        ts = block_forward(ts, b, variant)?;
    }
    Ok(TokenSequence {
        tokens: ops::layer_norm(ts.tokens, final_norm.0, final_norm.1, NORM_EPS)?,
        cls_index: ts.cls_index,
    })
}

/// Logits from the class token only: `tokens[cls_index] W + b`.
pub fn classify<'t, T: Scalar>(ts: TokenSequence<'t, T>, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let cls = ops::select_row(ts.tokens, ts.cls_index)?;
    let row = ops::reshape(cls, &[1, cls.shape()[0]])?;
    let logits = ops::linear(row, w, Some(b))?;
    let c = logits.shape()[1];
    Ok(ops::reshape(logits, &[c])?)
}
