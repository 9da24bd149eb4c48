//! The fixed front end: WAV ingestion, chunking and log-mel features.

mod chunk;
mod mel;
mod wav;

pub use chunk::{chunk, chunk_len, chunk_with, concat_valid, Chunk, DEFAULT_MIN_PARTIAL};
pub use mel::{
    hann, hz_to_mel, log_mel, log_mel_var, mel_to_hz, MelConfig, MelFilterbank, MEL_SAMPLE_RATE,
};
pub use wav::{load_wav, resample_linear, write_wav_pcm16, CANONICAL_RATE};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Mono PCM signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Usage("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Log-mel energies `[mel_bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor<f32>,
    pub hop: usize,
    pub window: usize,
}

impl FeatureMap {
    pub fn mel_bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Log-mel map of every chunk of `w`.
pub fn chunk_features(w: &Waveform, chunk_seconds: f64, cfg: &MelConfig) -> Result<Vec<FeatureMap>> {
    chunk(w, chunk_seconds)?
        .iter()
        .map(|c| log_mel(&c.wave, cfg))
        .collect()
}
