//! The experiment document: one JSON object with a section per subsystem.
//! Every section is optional and unknown keys are rejected with their path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::data::{gen_synthetic, load_gtzan, DatasetSplit, SyntheticKind, SyntheticTask};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::reprogramming::AdapterConfig;
use crate::source::{Arch, ModelConfig, PretrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_per_class: usize,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn generate(&self, kind: SyntheticKind) -> Result<DatasetSplit> {
        gen_synthetic(
            &SyntheticTask {
                kind,
                clip_seconds: self.clip_seconds,
                seed: self.seed,
            },
            self.n_per_class,
        )
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            clip_seconds: 3.0,
            seed: 1,
        }
    }
}

/// Target task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Four synthetic textures.
    Synthetic(SyntheticConfig),
    /// GTZAN with one clip path per line in each list file, relative to
    /// `root`.
    Gtzan {
        root: PathBuf,
        train_list: PathBuf,
        val_list: PathBuf,
        test_list: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<DatasetSplit> {
        match self {
            DatasetConfig::Synthetic(s) => s.generate(SyntheticKind::Target4Texture),
            DatasetConfig::Gtzan {
                root,
                train_list,
                val_list,
                test_list,
            } => load_gtzan(root, [train_list.as_path(), val_list.as_path(), test_list.as_path()]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub baselines: BaselineConfig,
    pub pretrain: PretrainOptions,
    /// Twelve-tone task the source model is pretrained on.
    pub source_task: SyntheticConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.mel.validate()?;
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::config("pretrain", "epochs and batch_size must be at least 1"));
        }
        if let Some(n) = self.adapter.n {
            if n == 0 {
                return Err(Error::config("adapter.n", "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Single-core preset used by the acceptance run: short patch chunks,
    /// narrow adapters, a larger step size and fewer epochs.
    pub fn desk(arch: Arch) -> Self {
        let mut cfg = Self::default();
        cfg.model.arch = arch;
        cfg.model.patch_transformer.chunk_seconds = 2.0;
        cfg.run.epochs = 15;
        // The patch source trains on fewer chunks per clip and overshoots at 1e-2.
        cfg.run.lr = match arch {
            Arch::Attention => 1e-2,
            Arch::PatchTransformer => 3e-3,
        };
        cfg.adapter.id_channels = 8;
        cfg.adapter.ids_hidden = 64;
        cfg.baselines.cnn.channels = 8;
        cfg.baselines.probe.hidden = 64;
        cfg.source_task = SyntheticConfig {
            n_per_class: 20,
            clip_seconds: 3.0,
            seed: 0,
        };
        cfg
    }
}
