use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    add_positional, classify, encoder_forward, init_block, insert_cls_token, AumBlockWeights, BlockDims,
    BlockVariant, ClsPosition, EncoderError, Result,
};
use crate::features::{embed_patches, patchify, Spectrogram};
use crate::init;
use crate::numerics::{ops, Array, Scalar, Tape, Var};

/// Architecture of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub patch_size: usize,
    pub n_mels: usize,
    pub frames: usize,
    pub variant: BlockVariant,
    pub cls_position: ClsPosition,
    pub num_classes: usize,
}

impl ModelConfig {
    fn preset(embed_dim: usize, variant: BlockVariant, num_classes: usize) -> Self {
        ModelConfig {
            embed_dim,
            depth: 24,
            state_dim: 16,
            expand: 2,
            conv_kernel: 4,
            patch_size: 16,
            n_mels: 128,
            frames: 1024,
            variant,
            cls_position: ClsPosition::Mid,
            num_classes,
        }
    }

    /// D = 384, 24 blocks.
    pub fn small(num_classes: usize) -> Self {
        Self::preset(384, BlockVariant::FoBi, num_classes)
    }

    /// D = 768, 24 blocks.
    pub fn base(num_classes: usize) -> Self {
        Self::preset(768, BlockVariant::FoBi, num_classes)
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            embed_dim: self.embed_dim,
            expand: self.expand,
            state_dim: self.state_dim,
            conv_kernel: self.conv_kernel,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.n_mels / self.patch_size) * (self.frames / self.patch_size)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn cls_index(&self) -> usize {
        self.cls_position.index(self.num_patches())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("patch_size", self.patch_size),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.n_mels % self.patch_size != 0 || self.frames % self.patch_size != 0 || self.num_patches() == 0 {
            return Err(EncoderError::Config(format!(
                "spectrogram F={} x T={} is not tiled by p={}",
                self.n_mels, self.frames, self.patch_size
            )));
        }
        Ok(())
    }
}

/// All parameters of a classifier, generic over the handle type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<H> {
    /// `[p*p, D]`
    pub patch_w: H,
    /// `[D]`
    pub patch_b: H,
    /// `[D]`
    pub cls: H,
    /// `[N+1, D]`
    pub pos: H,
    pub blocks: Vec<AumBlockWeights<H>>,
    pub final_gamma: H,
    pub final_beta: H,
    /// `[D, C]`
    pub head_w: H,
    /// `[C]`
    pub head_b: H,
}

impl<H> ModelWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> ModelWeights<U> {
        ModelWeights {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            cls: f(&self.cls),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            final_gamma: f(&self.final_gamma),
            final_beta: f(&self.final_beta),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Every tensor with a dotted name, in the same order as [`Self::map`].
    pub fn named(&self) -> Vec<(String, &H)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
            ("cls_token".to_string(), &self.cls),
            ("pos_embed".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, h)| (format!("blocks.{i}.{n}"), h)));
        }
        out.push(("norm_f.gamma".into(), &self.final_gamma));
        out.push(("norm_f.beta".into(), &self.final_beta));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    /// Mutable tensors in [`Self::named`] order.
    pub fn params_mut(&mut self) -> Vec<&mut H> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Rebuilds the same layout from handles listed in [`Self::named`] order.
    pub fn with_handles<U>(&self, handles: Vec<U>) -> ModelWeights<U> {
        let expected = self.named().len();
        assert_eq!(handles.len(), expected, "handle count");
        let mut it = handles.into_iter();
        self.map(|_| it.next().expect("counted"))
    }
}

impl<T: Scalar> ModelWeights<Array<T>> {
    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn on_tape<'t>(&self, tape: &'t Tape<T>) -> ModelWeights<Var<'t, T>> {
        self.map(|a| tape.param(a.clone()))
    }

    /// Registers every tensor as a constant.
    pub fn constants<'t>(&self, tape: &'t Tape<T>) -> ModelWeights<Var<'t, T>> {
        self.map(|a| tape.constant(a.clone()))
    }
}

/// Seeded initialization.
pub fn init_weights<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<Array<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let pp = cfg.patch_size * cfg.patch_size;
    Ok(ModelWeights {
        patch_w: init::linear_weight(pp, d, &mut rng),
        patch_b: init::uniform(&[d], 1.0 / (pp as f64).sqrt(), &mut rng),
        cls: init::normal(&[d], 0.02, &mut rng),
        pos: init::normal(&[cfg.num_tokens(), d], 0.02, &mut rng),
        blocks: (0..cfg.depth)
            .map(|_| init_block(cfg.block_dims(), cfg.variant, &mut rng))
            .collect(),
        final_gamma: Array::ones(&[d]),
        final_beta: Array::zeros(&[d]),
        head_w: init::linear_weight(d, cfg.num_classes, &mut rng),
        head_b: Array::zeros(&[cfg.num_classes]),
    })
}

fn check_weights<T: Scalar>(cfg: &ModelConfig, w: &ModelWeights<Var<'_, T>>) -> Result<()> {
    if w.blocks.len() != cfg.depth {
        return Err(EncoderError::Config(format!(
            "config asks for {} blocks, weights have {}",
            cfg.depth,
            w.blocks.len()
        )));
    }
    for b in &w.blocks {
        b.check_variant(cfg.variant)?;
    }
    let pos = w.pos.shape();
    if pos != [cfg.num_tokens(), cfg.embed_dim] {
        return Err(EncoderError::Shape(format!(
            "positional embeddings {pos:?} do not match {} tokens of width {}",
            cfg.num_tokens(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

/// Logits `[C]` for one clip given as patches `[N, p*p]`.
pub fn forward_patches<'t, T: Scalar>(
    patches: Var<'t, T>,
    cfg: &ModelConfig,
    w: &ModelWeights<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    check_weights(cfg, w)?;
    let n = patches.shape();
    if n != [cfg.num_patches(), cfg.patch_size * cfg.patch_size] {
        return Err(EncoderError::Shape(format!(
            "expected patches [{}, {}], got {n:?}",
            cfg.num_patches(),
            cfg.patch_size * cfg.patch_size
        )));
    }
    let emb = embed_patches(patches, w.patch_w, w.patch_b)?;
    let ts = insert_cls_token(emb, w.cls, cfg.cls_position)?;
    let ts = add_positional(ts, w.pos)?;
    let ts = encoder_forward(ts, &w.blocks, (w.final_gamma, w.final_beta), cfg.variant)?;
    classify(ts, w.head_w, w.head_b)
}

/// Patches of one spectrogram as a constant on `tape`.
pub fn patch_input<'t, T: Scalar>(tape: &'t Tape<T>, s: &Spectrogram, cfg: &ModelConfig) -> Result<Var<'t, T>> {
    if (s.n_mels(), s.frames()) != (cfg.n_mels, cfg.frames) {
        return Err(EncoderError::Shape(format!(
            "spectrogram {} x {} does not match configured {} x {}",
            s.n_mels(),
            s.frames(),
            cfg.n_mels,
            cfg.frames
        )));
    }
    Ok(tape.constant(patchify(s, cfg.patch_size)?.patches.cast()))
}

/// Logits `[B, C]` for a batch of spectrograms.
pub fn model_forward<'t, T: Scalar>(
    batch: &[Spectrogram],
    cfg: &ModelConfig,
    w: &ModelWeights<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    if batch.is_empty() {
        return Err(EncoderError::Shape("empty batch".into()));
    }
    let tape = w.cls.tape();
    let rows = batch
        .iter()
        .map(|s| forward_patches(patch_input(tape, s, cfg)?, cfg, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(ops::stack_rows(&rows)?)
}

/// Configuration plus stored weights.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub weights: ModelWeights<Array<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = init_weights(&config, seed)?;
        Ok(Model { config, weights })
    }

    /// Inference-only logits `[B, C]`, one short-lived tape per clip.
    pub fn predict(&self, batch: &[Spectrogram]) -> Result<Array<T>> {
        let c = self.config.num_classes;
        let mut out = Vec::with_capacity(batch.len() * c);
        for s in batch {
            let tape = Tape::new();
            let w = self.weights.constants(&tape);
            let logits = forward_patches(patch_input(&tape, s, &self.config)?, &self.config, &w)?;
            out.extend_from_slice(logits.value().data());
        }
        Ok(Array::new(&[batch.len(), c], out)?)
    }
}
