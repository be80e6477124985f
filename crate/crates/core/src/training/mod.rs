//! Toy-scale supervised training: losses, SpecAugment, mixup, the step
//! learning-rate schedule, AdamW and evaluation metrics.

mod augment;
mod data;
mod metrics;
mod schedule;

pub use augment::{apply_masks, draw_masks, mix_pair, mixup, mixup_lambda, spec_augment, SpecAugMask};
pub use data::{toy_dataset, toy_feature_config, toy_waveforms, Dataset, DATASET_INDEX};
pub use metrics::{accuracy, argmax, average_precision, mean_average_precision, MapReport};
pub use schedule::{AdamW, LrSchedule};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{model_forward, BlockVariant, ClsPosition, EncoderError, Model, ModelConfig};
use crate::features::{FeatureConfig, FeatureError, Spectrogram};
use crate::numerics::{ops, Array, NumericsError, Scalar, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Softmax cross-entropy with (possibly soft) targets.
    Ce,
    /// Per-class sigmoid cross-entropy, multi-hot targets.
    Bce,
}

/// Which score `evaluate` reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Acc,
    Map,
}

impl FromStr for Task {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" => Ok(Task::Acc),
            "map" => Ok(Task::Map),
            _ => Err(TrainError::Config(format!("unknown task {s:?} (expected acc or map)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Acc => "acc",
            Task::Map => "map",
        })
    }
}

/// Flat run configuration: recipe, model shape and frontend in one table.
/// Unknown keys are rejected. Defaults describe the synthetic two-class
/// setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub multilabel: bool,
    /// Base learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    /// First epoch at which the rate decays.
    pub lr_start: usize,
    /// Epochs between further decays.
    pub lr_step: usize,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Mixup strength in `[0, 1]`.
    pub mixup: f64,
    /// Widest frequency mask, in mel bins.
    pub specaug_freq: usize,
    /// Widest time mask, in frames.
    pub specaug_time: usize,

    pub variant: BlockVariant,
    pub cls_position: ClsPosition,
    pub embed_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub patch_size: usize,
    /// 0 takes the count from the data.
    pub num_classes: usize,

    pub sample_rate: u32,
    pub n_mels: usize,
    pub frames: usize,
    pub win_length: usize,
    pub n_fft: usize,
    pub hop_length: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    pub dataset_mean: f64,
    pub dataset_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let f = data::toy_feature_config();
        TrainConfig {
            seed: 0,
            epochs: 100,
            batch_size: 8,
            loss: LossKind::Ce,
            multilabel: false,
            lr: 2e-3,
            warmup_steps: 16,
            lr_start: 60,
            lr_step: 20,
            lr_decay: 0.5,
            weight_decay: 5e-7,
            beta1: 0.95,
            beta2: 0.999,
            adam_eps: 1e-8,
            mixup: 0.0,
            specaug_freq: 0,
            specaug_time: 0,
            variant: BlockVariant::FoBi,
            cls_position: ClsPosition::Mid,
            embed_dim: 16,
            depth: 2,
            state_dim: 8,
            expand: 2,
            conv_kernel: 4,
            patch_size: 16,
            num_classes: 0,
            sample_rate: f.sample_rate,
            n_mels: f.n_mels,
            frames: f.target_frames,
            win_length: f.win_length,
            n_fft: f.n_fft,
            hop_length: f.hop_length,
            f_min: f.f_min,
            f_max: f.f_max,
            log_floor: f.log_floor,
            dataset_mean: f.dataset_mean,
            dataset_std: f.dataset_std,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            TrainError::Config(m) => TrainError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.mixup) {
            return bad(format!("mixup {} must lie in [0, 1]", self.mixup));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) {
            return bad(format!("lr {} must be non-negative", self.lr));
        }
        if self.specaug_freq > self.n_mels || self.specaug_time > self.frames {
            return bad(format!(
                "specaug masks {} / {} exceed the {} x {} spectrogram",
                self.specaug_freq, self.specaug_time, self.n_mels, self.frames
            ));
        }
        self.feature_config().validate()?;
        self.model_config(self.num_classes.max(1)).validate()?;
        Ok(())
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.sample_rate,
            n_mels: self.n_mels,
            target_frames: self.frames,
            win_length: self.win_length,
            n_fft: self.n_fft,
            hop_length: self.hop_length,
            f_min: self.f_min,
            f_max: self.f_max,
            log_floor: self.log_floor,
            dataset_mean: self.dataset_mean,
            dataset_std: self.dataset_std,
            patch_size: self.patch_size,
            patch_stride: self.patch_size,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            depth: self.depth,
            state_dim: self.state_dim,
            expand: self.expand,
            conv_kernel: self.conv_kernel,
            patch_size: self.patch_size,
            n_mels: self.n_mels,
            frames: self.frames,
            variant: self.variant,
            cls_position: self.cls_position,
            num_classes,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            warmup_steps: self.warmup_steps,
            start: self.lr_start,
            step: self.lr_step,
            decay: self.lr_decay,
        }
    }

    /// The score reported per epoch and by default in evaluation.
    pub fn task(&self) -> Task {
        if self.multilabel {
            Task::Map
        } else {
            Task::Acc
        }
    }
}

/// Spectrograms with target rows (one-hot, multi-hot or mixed).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub spectrograms: Vec<Spectrogram>,
    pub targets: Vec<Vec<f32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.spectrograms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrograms.is_empty()
    }

    pub fn target_array<T: Scalar>(&self) -> Result<Array<T>> {
        let c = self.targets.first().map_or(0, |t| t.len());
        let flat: Vec<T> = self.targets.iter().flatten().map(|&v| T::from_f64(v as f64)).collect();
        Ok(Array::new(&[self.len(), c], flat)?)
    }
}

/// Mean loss of `logits [B, C]` against `targets [B, C]`.
pub fn loss<'t, T: Scalar>(logits: Var<'t, T>, targets: &Array<T>, kind: LossKind) -> Result<Var<'t, T>> {
    Ok(match kind {
        LossKind::Ce => ops::softmax_cross_entropy(logits, targets)?,
        LossKind::Bce => ops::bce_with_logits(logits, targets)?,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Accuracy or mAP on the clean training set.
    pub metric: f64,
}

/// Writes `epoch,step,lr,loss,metric`.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Data(e.to_string()))?;
    let io = |e: csv::Error| TrainError::Data(e.to_string());
    w.write_record(["epoch", "step", "lr", "loss", "metric"]).map_err(io)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:e}", r.lr),
            format!("{:.9}", r.loss),
            format!("{:.6}", r.metric),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a model whose class count comes from the config or the data.
pub fn new_model<T: Scalar>(cfg: &TrainConfig, data: &Dataset) -> Result<Model<T>> {
    let classes = if cfg.num_classes > 0 { cfg.num_classes } else { data.num_classes };
    Ok(Model::new(cfg.model_config(classes), cfg.seed)?)
}

fn augmented_batch<R: Rng>(data: &Dataset, classes: usize, idx: &[usize], cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let mut batch = Batch {
        spectrograms: Vec::with_capacity(idx.len()),
        targets: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let s = &data.spectrograms[i];
        let s = if cfg.specaug_freq > 0 || cfg.specaug_time > 0 {
            spec_augment(s, cfg.specaug_freq, cfg.specaug_time, rng)?.0
        } else {
            s.clone()
        };
        batch.spectrograms.push(s);
        batch.targets.push(data.target(i, classes));
    }
    mixup(&batch, cfg.mixup, rng)
}

/// One optimizer update on `batch`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    kind: LossKind,
    lr: f64,
) -> Result<f64> {
    let grads = {
        let tape = Tape::<T>::new();
        let w = model.weights.on_tape(&tape);
        let logits = model_forward(&batch.spectrograms, &model.config, &w)?;
        let l = loss(logits, &batch.target_array()?, kind)?;
        tape.backward(l)?;
        let value = l.value().item().as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        let grads: Vec<Array<T>> = w.named().into_iter().map(|(_, v)| tape.grad_or_zeros(*v)).collect();
        (value, grads)
    };
    let mut params = model.weights.params_mut();
    opt.step(&mut params, &grads.1, lr);
    Ok(grads.0)
}

/// Trains in place and returns one log row per epoch. Deterministic for a
/// fixed seed.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    data.check_geometry(cfg.n_mels, cfg.frames)?;
    if let Some(k) = data.labels.iter().flatten().find(|&&k| k >= model.config.num_classes) {
        return Err(TrainError::Data(format!(
            "label {k} out of range for {} classes",
            model.config.num_classes
        )));
    }
    let shapes: Vec<Vec<usize>> = model.weights.named().iter().map(|(_, a)| a.shape().to_vec()).collect();
    let mut opt = AdamW::new(&shapes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let sched = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut total, mut seen, mut lr) = (0.0, 0usize, sched.lr_at(step, epoch));
        for idx in order.chunks(cfg.batch_size) {
            let batch = augmented_batch(data, model.config.num_classes, idx, cfg, &mut rng)?;
            lr = sched.lr_at(step, epoch);
            let l = train_step(model, &mut opt, &batch, cfg.loss, lr)?;
            if !l.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss: l });
            }
            step += 1;
            total += l * idx.len() as f64;
            seen += idx.len();
        }
        let metric = evaluate(model, data, cfg.task())?.value;
        let row = EpochLog {
            epoch,
            step,
            lr,
            loss: total / seen as f64,
            metric,
        };
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.5} {} {:.4}",
            row.epoch,
            row.step,
            row.lr,
            row.loss,
            cfg.task(),
            row.metric
        );
        log.push(row);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub value: f64,
    /// Classes without positives, left out of mAP.
    pub excluded_classes: usize,
}

/// Accuracy or mAP of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, task: Task) -> Result<EvalReport> {
    let scores = model.predict(&data.spectrograms)?;
    Ok(match task {
        Task::Acc => EvalReport {
            task,
            value: accuracy(&scores, &data.labels),
            excluded_classes: 0,
        },
        Task::Map => {
            let r = mean_average_precision(&scores, &data.labels);
            EvalReport {
                task,
                value: r.map,
                excluded_classes: r.excluded,
            }
        }
    })
}
