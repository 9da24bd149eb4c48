//! Comparison methods trained with the same harness as the adapters: a
//! residual CNN from scratch, full fine-tuning, and an MLP probe on frozen
//! representations.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::stream_rng;
use crate::source::SourceModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: 50,
            blocks: 4,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 512 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub cnn: CnnConfig,
    pub probe: ProbeConfig,
}

/// Log-mel input, a stem conv, pre-activation residual blocks, global mean
/// pooling and one dense layer.
#[derive(Clone, Debug)]
pub struct BlCnn {
    pub config: CnnConfig,
    pub params: ParamStore,
}

/// Scalar count of [`BlCnn`] for `k` target classes.
pub const fn bl_cnn_params(cfg: &CnnConfig, k: usize) -> usize {
    let c = cfg.channels;
    nn::conv_params(1, c, cfg.kernel) + cfg.blocks * 2 * nn::conv_params(c, c, cfg.kernel) + nn::linear_params(c, k)
}

impl BlCnn {
    pub fn new(cfg: &CnnConfig, num_target: usize, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.kernel % 2 == 0 {
            return Err(Error::config("baselines.cnn", "channels must be positive and the kernel odd"));
        }
        let mut rng = stream_rng(seed, "init/baseline/bl_cnn");
        let mut p = ParamStore::new();
        let c = cfg.channels;
        nn::add_conv(&mut p, "cnn.stem", 1, c, cfg.kernel, &mut rng)?;
        for b in 0..cfg.blocks {
            nn::add_conv(&mut p, &format!("cnn.block{b}.conv1"), c, c, cfg.kernel, &mut rng)?;
            nn::add_conv(&mut p, &format!("cnn.block{b}.conv2"), c, c, cfg.kernel, &mut rng)?;
        }
        nn::add_linear(&mut p, "cnn.head", c, num_target, &mut rng)?;
        Ok(Self {
            config: cfg.clone(),
            params: p,
        })
    }

    /// `x + conv2(relu(conv1(relu(x))))`; shape-preserving.
    pub fn block<F: Real>(&self, tape: &mut Tape<F>, b: usize, x: Var) -> Result<Var> {
        let pad = self.config.kernel / 2;
        let h = tape.relu(x);
        let h = nn::conv(tape, &self.params, &format!("cnn.block{b}.conv1"), h, 1, pad)?;
        let h = tape.relu(h);
        let h = nn::conv(tape, &self.params, &format!("cnn.block{b}.conv2"), h, 1, pad)?;
        tape.add(x, h)
    }

    /// Logits `[1, K_T]` for one feature map `[mel, frames]`.
    pub fn logits<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("bl_cnn", format!("expected [mel, frames], got {shape:?}")));
        }
        let pad = self.config.kernel / 2;
        let x = nn::scale_features(tape, x)?;
        let x = tape.reshape(x, &[1, 1, shape[0], shape[1]])?;
        let mut h = nn::conv(tape, &self.params, "cnn.stem", x, 1, pad)?;
        for b in 0..self.config.blocks {
            h = self.block(tape, b, h)?;
        }
        let h = tape.relu(h);
        let c = self.config.channels;
        let h = tape.reshape(h, &[c, shape[0] * shape[1]])?;
        let h = tape.transpose(h)?;
        let pooled = tape.mean_rows(h)?;
        nn::linear(tape, &self.params, "cnn.head", pooled)
    }
}

/// An unfrozen copy of `model` whose head is replaced by a freshly
/// initialized `num_target`-way head.
pub fn fine_tune(model: &SourceModel, num_target: usize, seed: u64) -> Result<SourceModel> {
    let mut m = model.clone();
    m.params.unfreeze();
    m.params.remove_prefix("source.head.");
    let mut rng = stream_rng(seed, "init/baseline/bl_ft/head");
    let d = m.tap_dim();
    nn::add_linear(&mut m.params, "source.head", d, num_target, &mut rng)?;
    Ok(m)
}

/// One-hidden-layer MLP on frozen representations.
#[derive(Clone, Debug)]
pub struct Probe {
    pub params: ParamStore,
}

pub const fn probe_params(dim: usize, hidden: usize, k: usize) -> usize {
    nn::linear_params(dim, hidden) + nn::linear_params(hidden, k)
}

impl Probe {
    pub fn new(dim: usize, cfg: &ProbeConfig, num_target: usize, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::config("baselines.probe.hidden", "must be positive"));
        }
        let mut rng = stream_rng(seed, "init/baseline/bl_rep");
        let mut p = ParamStore::new();
        nn::add_linear(&mut p, "probe.fc1", dim, cfg.hidden, &mut rng)?;
        nn::add_linear(&mut p, "probe.fc2", cfg.hidden, num_target, &mut rng)?;
        Ok(Self { params: p })
    }

    pub fn logits<F: Real>(&self, tape: &mut Tape<F>, rep: Var) -> Result<Var> {
        let h = nn::linear(tape, &self.params, "probe.fc1", rep)?;
        let h = tape.relu(h);
        nn::linear(tape, &self.params, "probe.fc2", h)
    }
}

/// Mean of the tap activation over a clip's chunks, `[1, d]`. The tap is
/// already pooled over time by both architectures.
pub fn representation(model: &SourceModel, chunks: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("representation chunks"));
    }
    let d = model.tap_dim();
    let mut sum = vec![0.0f64; d];
    for c in chunks {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(c.clone());
        let v = model.backbone(&mut tape, x)?;
        sum.iter_mut().zip(tape.value(v).data()).for_each(|(s, &v)| *s += f64::from(v));
    }
    let n = chunks.len() as f64;
    Tensor::new(vec![1, d], sum.into_iter().map(|s| (s / n) as f32).collect())
}

/// Representations keyed by clip id, computed on first use.
#[derive(Debug, Default)]
pub struct RepresentationCache {
    entries: HashMap<String, Tensor<f32>>,
}

impl RepresentationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute(&mut self, id: &str, model: &SourceModel, chunks: &[Tensor<f32>]) -> Result<&Tensor<f32>> {
        if !self.entries.contains_key(id) {
            let rep = representation(model, chunks)?;
            self.entries.insert(id.to_string(), rep);
        }
        Ok(&self.entries[id])
    }
}
