//! Datasets: generated synthetic tasks and the GTZAN directory layout.

mod gtzan;
mod synthetic;

use std::path::PathBuf;
use std::sync::Arc;

pub use gtzan::{load_gtzan, GTZAN_GENRES};
pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticTask};

use crate::dsp::{load_wav, Waveform};
use crate::error::Result;

#[derive(Clone, Debug)]
pub enum ClipAudio {
    Memory(Arc<Waveform>),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Clip {
    /// Unique within a dataset, e.g. `blues/blues.00012.wav`.
    pub id: String,
    pub label: usize,
    pub audio: ClipAudio,
}

impl Clip {
    /// Returns the audio, reading it from disk for file-backed clips.
    pub fn waveform(&self) -> Result<Arc<Waveform>> {
        match &self.audio {
            ClipAudio::Memory(w) => Ok(Arc::clone(w)),
            ClipAudio::File(p) => load_wav(p).map(Arc::new),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Clip>,
    pub val: Vec<Clip>,
    pub test: Vec<Clip>,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, which: Split) -> &[Clip] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Writes every clip as `root/<class>/<id>.wav` plus `train.txt`,
    /// `val.txt` and `test.txt` split lists.
    pub fn export(&self, root: impl Into<PathBuf>) -> Result<()> {
        use crate::error::Error;
        let root = root.into();
        for (name, clips) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let mut list = String::new();
            for clip in clips.iter() {
                let path = root.join(&clip.id);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                crate::dsp::write_wav_pcm16(&path, &*clip.waveform()?)?;
                list.push_str(&clip.id);
                list.push('\n');
            }
            let p = root.join(format!("{name}.txt"));
            std::fs::write(&p, list).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
