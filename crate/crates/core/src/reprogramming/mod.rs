//! Trainable adapters around a frozen source model, plus the many-to-one
//! label map that turns source-class probabilities into target scores.
//!
//! * `ii`: a universal additive waveform perturbation `x + θ`.
//! * `id`: a residual conv transform of the log-mel map, `X + C(X)`.
//! * `ids`: a residual MLP on the tap activation, `v + f(v)`, followed by the
//!   frozen classifier head. Backward never enters the backbone.

mod label_map;

use serde::{Deserialize, Serialize};

pub use label_map::{chunk_average, map_labels, LabelMap};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::dsp::log_mel_var;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::stream_rng;
use crate::source::{Arch, Checkpoint, SourceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmrMethod {
    Ii,
    Id,
    Ids,
}

impl NmrMethod {
    pub const ALL: [NmrMethod; 3] = [NmrMethod::Ii, NmrMethod::Id, NmrMethod::Ids];

    pub fn name(self) -> &'static str {
        match self {
            NmrMethod::Ii => "ii",
            NmrMethod::Id => "id",
            NmrMethod::Ids => "ids",
        }
    }

    pub fn input(self) -> InputKind {
        match self {
            NmrMethod::Ii => InputKind::Waveform,
            NmrMethod::Id | NmrMethod::Ids => InputKind::Features,
        }
    }
}

/// What one chunk looks like when fed to a method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    /// Raw samples `[chunk_samples]`.
    Waveform,
    /// Log-mel map `[mel, frames]`.
    Features,
}

/// Where chunk probabilities are averaged. Both give the same raw scores
/// because the label map is linear; they differ only in rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkAveraging {
    #[default]
    Target,
    Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Hidden channels of the feature transform.
    pub id_channels: usize,
    pub id_kernel: usize,
    /// Hidden width of the skip adapter.
    pub ids_hidden: usize,
    /// Sources per target; `None` uses 2 for the attention arch and 5 for
    /// the patch transformer.
    pub n: Option<usize>,
    /// Explicit assignment overriding the block layout.
    pub assignment: Option<Vec<Vec<usize>>>,
    pub chunk_averaging: ChunkAveraging,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            id_channels: 136,
            id_kernel: 3,
            ids_hidden: 128,
            n: None,
            assignment: None,
            chunk_averaging: ChunkAveraging::Target,
        }
    }
}

impl AdapterConfig {
    pub fn fan_in(&self, arch: Arch) -> usize {
        self.n.unwrap_or(match arch {
            Arch::Attention => 2,
            Arch::PatchTransformer => 5,
        })
    }

    pub fn label_map(&self, arch: Arch, num_target: usize, num_source: usize) -> Result<LabelMap> {
        match &self.assignment {
            Some(a) => {
                if a.len() != num_target {
                    return Err(Error::config(
                        "adapter.assignment",
                        format!("lists {} targets but the task has {num_target}", a.len()),
                    ));
                }
                LabelMap::new(a.clone(), num_source)
            }
            None => LabelMap::blocks(self.fan_in(arch), num_target, num_source),
        }
    }
}

/// Scalar count of the residual feature transform with `c` hidden channels
/// and a `k`×`k` kernel.
pub const fn feature_transform_params(c: usize, k: usize) -> usize {
    nn::conv_params(1, c, k) + nn::conv_params(c, c, k) + nn::conv_params(c, 1, k)
}

/// Scalar count of the skip adapter for tap width `d`.
pub const fn skip_adapter_params(d: usize, hidden: usize) -> usize {
    nn::linear_params(d, hidden) + nn::linear_params(hidden, d)
}

/// Trainable parameters of one method plus its label map.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub method: NmrMethod,
    pub config: AdapterConfig,
    pub label_map: LabelMap,
    pub params: ParamStore,
}

impl Adapter {
    /// Builds a method around `model`. The output layer of `id` and `ids` is
    /// zero, and `θ` starts at zero, so the adapted model initially predicts
    /// exactly what the frozen model does.
    pub fn new(method: NmrMethod, config: &AdapterConfig, model: &SourceModel, num_target: usize, seed: u64) -> Result<Self> {
        if !model.is_frozen() {
            return Err(Error::Contract("adapters wrap a frozen source model; call freeze() first".into()));
        }
        let label_map = config.label_map(model.arch(), num_target, model.num_classes())?;
        let mut rng = stream_rng(seed, &format!("init/adapter/{}", method.name()));
        let mut params = ParamStore::new();
        match method {
            NmrMethod::Ii => params.add_zeros("adapter.theta", &[model.chunk_samples()])?,
            NmrMethod::Id => {
                let (c, k) = (config.id_channels, config.id_kernel);
                if c == 0 || k == 0 || k % 2 == 0 {
                    return Err(Error::config("adapter.id_kernel", "channels must be positive and the kernel odd"));
                }
                nn::add_conv(&mut params, "adapter.conv1", 1, c, k, &mut rng)?;
                nn::add_conv(&mut params, "adapter.conv2", c, c, k, &mut rng)?;
                nn::add_conv_zero(&mut params, "adapter.conv3", c, 1, k)?;
            }
            NmrMethod::Ids => {
                if config.ids_hidden == 0 {
                    return Err(Error::config("adapter.ids_hidden", "must be positive"));
                }
                let d = model.tap_dim();
                nn::add_linear(&mut params, "adapter.fc1", d, config.ids_hidden, &mut rng)?;
                nn::add_linear_zero(&mut params, "adapter.fc2", config.ids_hidden, d)?;
            }
        }
        Ok(Self {
            method,
            config: config.clone(),
            label_map,
            params,
        })
    }

    pub fn num_target(&self) -> usize {
        self.label_map.num_target()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.count_trainable()
    }

    /// `x + θ` for one waveform chunk `[samples]`.
    pub fn apply_ii<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let theta = tape.param_named(&self.params, "adapter.theta")?;
        if tape.shape(x) != tape.shape(theta) {
            return Err(Error::dim(
                "apply_ii",
                format!("chunk has shape {:?} but θ has {:?}", tape.shape(x), tape.shape(theta)),
            ));
        }
        tape.add(x, theta)
    }

    /// `X + C(X)` for one feature map `[mel, frames]`.
    pub fn apply_id<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("apply_id", format!("expected [mel, frames], got {shape:?}")));
        }
        let pad = self.config.id_kernel / 2;
        let h = tape.reshape(x, &[1, 1, shape[0], shape[1]])?;
        let h = nn::conv(tape, &self.params, "adapter.conv1", h, 1, pad)?;
        let h = tape.relu(h);
        let h = nn::conv(tape, &self.params, "adapter.conv2", h, 1, pad)?;
        let h = tape.relu(h);
        let h = nn::conv(tape, &self.params, "adapter.conv3", h, 1, pad)?;
        let h = tape.reshape(h, &shape)?;
        tape.add(x, h)
    }

    /// `v + f(v)` on a tap activation `[1, d]`.
    pub fn apply_skip<F: Real>(&self, tape: &mut Tape<F>, v: Var) -> Result<Var> {
        let h = nn::linear(tape, &self.params, "adapter.fc1", v)?;
        let h = tape.relu(h);
        let h = nn::linear(tape, &self.params, "adapter.fc2", h)?;
        tape.add(v, h)
    }

    /// Source-class probabilities `[1, K_S]` for one chunk.
    pub fn source_probs<F: Real>(&self, model: &SourceModel, tape: &mut Tape<F>, chunk: Var) -> Result<Var> {
        match self.method {
            NmrMethod::Ii => {
                let x = self.apply_ii(tape, chunk)?;
                let feats = log_mel_var(tape, x, &model.mel)?;
                model.forward(tape, feats)
            }
            NmrMethod::Id => {
                let x = self.apply_id(tape, chunk)?;
                model.forward(tape, x)
            }
            NmrMethod::Ids => {
                let v = model.backbone(tape, chunk)?;
                let v = self.apply_skip(tape, v)?;
                let logits = model.head(tape, v)?;
                tape.softmax(logits)
            }
        }
    }

    /// Raw target scores `[1, K_T]` of one clip, averaged over its chunks.
    pub fn clip_scores<F: Real>(&self, model: &SourceModel, tape: &mut Tape<F>, chunks: &[Tensor<f32>]) -> Result<Var> {
        if chunks.is_empty() {
            return Err(Error::EmptyInput("clip chunks"));
        }
        let rows = chunks
            .iter()
            .map(|c| {
                let x = tape.constant(c.cast());
                self.source_probs(model, tape, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let probs = tape.concat_rows(&rows)?;
        let m = tape.constant(self.label_map.matrix());
        match self.config.chunk_averaging {
            ChunkAveraging::Target => {
                let mapped = tape.matmul(probs, m)?;
                tape.mean_rows(mapped)
            }
            ChunkAveraging::Source => {
                let mean = tape.mean_rows(probs)?;
                tape.matmul(mean, m)
            }
        }
    }

    /// Raw target scores of one clip without recording gradients.
    pub fn predict_clip(&self, model: &SourceModel, chunks: &[Tensor<f32>]) -> Result<Vec<f32>> {
        let per_chunk = chunks
            .iter()
            .map(|c| {
                let mut tape = Tape::<f32>::new();
                let x = tape.constant(c.clone());
                let p = self.source_probs(model, &mut tape, x)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        match self.config.chunk_averaging {
            ChunkAveraging::Target => {
                let mapped = per_chunk
                    .iter()
                    .map(|p| map_labels(&self.label_map, p))
                    .collect::<Result<Vec<_>>>()?;
                chunk_average(&mapped)
            }
            ChunkAveraging::Source => map_labels(&self.label_map, &chunk_average(&per_chunk)?),
        }
    }

    pub fn to_checkpoint(&self, source_checksum: &str) -> Checkpoint {
        let meta = AdapterMeta {
            kind: "adapter".into(),
            method: self.method,
            config: self.config.clone(),
            label_map: self.label_map.clone(),
            source_checksum: source_checksum.to_string(),
        };
        Checkpoint {
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            params: self.params.clone(),
        }
    }

    /// Restores an adapter and the checksum of the source it was trained on.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(Self, String)> {
        let meta: AdapterMeta =
            serde_json::from_value(ckpt.metadata).map_err(|e| Error::format("metadata", e.to_string()))?;
        if meta.kind != "adapter" {
            return Err(Error::format("metadata.kind", format!("expected `adapter`, got `{}`", meta.kind)));
        }
        let adapter = Self {
            method: meta.method,
            config: meta.config,
            label_map: LabelMap::new(meta.label_map.assignment, meta.label_map.num_source)?,
            params: ckpt.params,
        };
        Ok((adapter, meta.source_checksum))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    kind: String,
    method: NmrMethod,
    config: AdapterConfig,
    label_map: LabelMap,
    source_checksum: String,
}

#[cfg(test)]
mod tests;
