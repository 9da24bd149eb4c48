//! Frozen source classifiers standing in for a speech-command model and an
//! audio spectrogram transformer. Each exposes its classifier head and the
//! activation feeding it (the tap) so adapters can work in either space.

mod attention;
mod checkpoint;
mod patch;
mod pretrain;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DTYPE_F32};
pub use pretrain::{pretrain_source, PretrainOptions, PretrainOutcome, PRETRAIN_FLOOR};

use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::dsp::{chunk_len, MelConfig, MEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two strided convs, a frame projection and attention pooling.
    #[serde(alias = "attention_rnnless")]
    Attention,
    /// Patch embedding, class token and pre-norm transformer blocks.
    PatchTransformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Attention => "attention",
            Arch::PatchTransformer => "patch_transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub num_classes: usize,
    pub chunk_seconds: f64,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_classes: 35,
            chunk_seconds: 1.0,
            conv1_channels: 8,
            conv2_channels: 16,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub num_classes: usize,
    pub chunk_seconds: f64,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            num_classes: 50,
            chunk_seconds: 10.0,
            patch: 16,
            dim: 32,
            depth: 2,
            mlp_hidden: 64,
        }
    }
}

/// Source model section of the experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub attention: AttentionConfig,
    pub patch_transformer: PatchConfig,
    /// Layer whose output feeds the skip adapter; `None` picks the
    /// activation directly before the classifier head.
    pub tap_layer: Option<String>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Attention,
            attention: AttentionConfig::default(),
            patch_transformer: PatchConfig::default(),
            tap_layer: None,
            seed: 0,
        }
    }
}

pub const TAP_ATTENTION_POOL: &str = "attention_pool";
pub const TAP_CLS: &str = "cls_token";
pub const TAP_CLS_PRE_NORM: &str = "cls_token_pre_norm";

/// Architecture plus its hyperparameters, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchSpec {
    Attention(AttentionConfig),
    PatchTransformer(PatchConfig),
}

impl ArchSpec {
    pub fn arch(&self) -> Arch {
        match self {
            ArchSpec::Attention(_) => Arch::Attention,
            ArchSpec::PatchTransformer(_) => Arch::PatchTransformer,
        }
    }

    pub fn chunk_seconds(&self) -> f64 {
        match self {
            ArchSpec::Attention(c) => c.chunk_seconds,
            ArchSpec::PatchTransformer(c) => c.chunk_seconds,
        }
    }

    fn default_tap(&self) -> &'static str {
        match self {
            ArchSpec::Attention(_) => TAP_ATTENTION_POOL,
            ArchSpec::PatchTransformer(_) => TAP_CLS,
        }
    }

    fn valid_taps(&self) -> &'static [&'static str] {
        match self {
            ArchSpec::Attention(_) => &[TAP_ATTENTION_POOL],
            ArchSpec::PatchTransformer(_) => &[TAP_CLS, TAP_CLS_PRE_NORM],
        }
    }
}

/// A source classifier and its preprocessing configuration.
#[derive(Clone, Debug)]
pub struct SourceModel {
    pub spec: ArchSpec,
    pub mel: MelConfig,
    pub tap_layer: String,
    pub params: ParamStore,
}

impl SourceModel {
    pub fn arch(&self) -> Arch {
        self.spec.arch()
    }

    pub fn chunk_seconds(&self) -> f64 {
        self.spec.chunk_seconds()
    }

    pub fn chunk_samples(&self) -> usize {
        chunk_len(self.chunk_seconds(), MEL_SAMPLE_RATE)
    }

    /// Frames of the log-mel map of one chunk.
    pub fn chunk_frames(&self) -> usize {
        self.mel.frames(self.chunk_samples()).unwrap_or(0)
    }

    /// Output classes of the current head.
    pub fn num_classes(&self) -> usize {
        self.params
            .get("source.head.bias")
            .map(|p| p.numel())
            .unwrap_or(0)
    }

    /// Width of the tap activation, which is also the classifier input.
    pub fn tap_dim(&self) -> usize {
        match &self.spec {
            ArchSpec::Attention(c) => c.hidden,
            ArchSpec::PatchTransformer(c) => c.dim,
        }
    }

    /// Shape of the tap activation `v` for one chunk.
    pub fn tap_shape(&self) -> [usize; 2] {
        [1, self.tap_dim()]
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    pub fn count_params(&self) -> usize {
        self.params.count_total()
    }

    /// Everything up to and including the tap, for one chunk `[mel, frames]`.
    pub fn backbone<F: Real>(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        self.check_features(tape, features)?;
        match &self.spec {
            ArchSpec::Attention(c) => attention::backbone(c, &self.params, tape, features),
            ArchSpec::PatchTransformer(c) => {
                let pre = patch::encoder(c, &self.params, tape, features)?;
                if self.tap_layer == TAP_CLS_PRE_NORM {
                    Ok(pre)
                } else {
                    crate::nn::layer_norm(tape, &self.params, "source.final_norm", pre)
                }
            }
        }
    }

    /// Classifier head from the tap to logits `[1, K]`.
    pub fn head<F: Real>(&self, tape: &mut Tape<F>, v: Var) -> Result<Var> {
        let v = if self.tap_layer == TAP_CLS_PRE_NORM {
            crate::nn::layer_norm(tape, &self.params, "source.final_norm", v)?
        } else {
            v
        };
        crate::nn::linear(tape, &self.params, "source.head", v)
    }

    /// Class probabilities `[1, K]` and the tap activation from one pass.
    pub fn forward_with_tap<F: Real>(&self, tape: &mut Tape<F>, features: Var) -> Result<(Var, Var)> {
        let v = self.backbone(tape, features)?;
        let logits = self.head(tape, v)?;
        Ok((tape.softmax(logits)?, v))
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        Ok(self.forward_with_tap(tape, features)?.0)
    }

    pub fn logits<F: Real>(&self, tape: &mut Tape<F>, features: Var) -> Result<Var> {
        let v = self.backbone(tape, features)?;
        self.head(tape, v)
    }

    fn check_features<F: Real>(&self, tape: &Tape<F>, features: Var) -> Result<()> {
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[0] != self.mel.mel_bins {
            return Err(Error::dim(
                "source.forward",
                format!("features must be [{}, frames], got {shape:?}", self.mel.mel_bins),
            ));
        }
        if self.arch() == Arch::PatchTransformer && shape[1] != self.chunk_frames() {
            return Err(Error::dim(
                "source.forward",
                format!("axis 1: expected {} frames per chunk, got {}", self.chunk_frames(), shape[1]),
            ));
        }
        Ok(())
    }
}

fn validate_common(mel: &MelConfig, num_classes: usize, chunk_seconds: f64) -> Result<()> {
    mel.validate()?;
    if num_classes < 2 {
        return Err(Error::config("model.num_classes", "must be at least 2"));
    }
    if !(chunk_seconds > 0.0) {
        return Err(Error::config("model.chunk_seconds", "must be positive"));
    }
    let samples = chunk_len(chunk_seconds, MEL_SAMPLE_RATE);
    if mel.frames(samples).is_none() {
        return Err(Error::config("model.chunk_seconds", "chunk is shorter than one analysis window"));
    }
    Ok(())
}

fn resolve_tap(spec: &ArchSpec, tap: Option<&str>) -> Result<String> {
    let tap = tap.unwrap_or(spec.default_tap());
    if !spec.valid_taps().contains(&tap) {
        return Err(Error::config(
            "model.tap_layer",
            format!("`{tap}` is not a tap of {}; valid: {:?}", spec.arch().name(), spec.valid_taps()),
        ));
    }
    Ok(tap.to_string())
}

fn build<R: Rng>(spec: ArchSpec, mel: &MelConfig, tap: Option<&str>, rng: &mut R) -> Result<SourceModel> {
    let tap_layer = resolve_tap(&spec, tap)?;
    let params = match &spec {
        ArchSpec::Attention(c) => {
            validate_common(mel, c.num_classes, c.chunk_seconds)?;
            attention::init(c, mel, rng)?
        }
        ArchSpec::PatchTransformer(c) => {
            validate_common(mel, c.num_classes, c.chunk_seconds)?;
            patch::init(c, mel, rng)?
        }
    };
    Ok(SourceModel {
        spec,
        mel: mel.clone(),
        tap_layer,
        params,
    })
}

pub fn build_attention_model(cfg: &AttentionConfig, mel: &MelConfig, seed: u64) -> Result<SourceModel> {
    let mut rng = stream_rng(seed, "init/source/attention");
    build(ArchSpec::Attention(cfg.clone()), mel, None, &mut rng)
}

pub fn build_patch_transformer(cfg: &PatchConfig, mel: &MelConfig, seed: u64) -> Result<SourceModel> {
    let mut rng = stream_rng(seed, "init/source/patch_transformer");
    build(ArchSpec::PatchTransformer(cfg.clone()), mel, None, &mut rng)
}

/// Builds the configured architecture with its configured tap.
pub fn build_source(cfg: &ModelConfig, mel: &MelConfig) -> Result<SourceModel> {
    let (spec, stream) = match cfg.arch {
        Arch::Attention => (ArchSpec::Attention(cfg.attention.clone()), "init/source/attention"),
        Arch::PatchTransformer => (
            ArchSpec::PatchTransformer(cfg.patch_transformer.clone()),
            "init/source/patch_transformer",
        ),
    };
    let mut rng = stream_rng(cfg.seed, stream);
    build(spec, mel, cfg.tap_layer.as_deref(), &mut rng)
}

pub use patch::patch_grid;
