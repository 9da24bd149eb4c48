use std::cell::OnceCell;

use crate::autodiff::Tensor;
use crate::baselines::representation;
use crate::data::{DatasetSplit, Split};
use crate::dsp::{chunk, log_mel};
use crate::error::Result;
use crate::source::SourceModel;

/// Model input for one clip.
#[derive(Clone, Debug)]
pub struct PreparedClip {
    pub id: String,
    pub label: usize,
    /// One tensor per chunk: samples, log-mel map, or a single
    /// representation row, depending on the input kind.
    pub chunks: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Waveform,
    Features,
    Representation,
}

type Splits = [Vec<PreparedClip>; 3];

/// Per-split inputs computed once and shared across methods and seeds.
pub struct Prepared<'a> {
    pub data: &'a DatasetSplit,
    pub source: &'a SourceModel,
    waves: OnceCell<Splits>,
    features: OnceCell<Splits>,
    reps: OnceCell<Splits>,
}

fn index(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

fn try_init<'c>(cell: &'c OnceCell<Splits>, f: impl FnOnce() -> Result<Splits>) -> Result<&'c Splits> {
    if cell.get().is_none() {
        let v = f()?;
        let _ = cell.set(v);
    }
    Ok(cell.get().expect("initialized above"))
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a DatasetSplit, source: &'a SourceModel) -> Self {
        Self {
            data,
            source,
            waves: OnceCell::new(),
            features: OnceCell::new(),
            reps: OnceCell::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn get(&self, input: Input, split: Split) -> Result<&[PreparedClip]> {
        let all = match input {
            Input::Waveform => try_init(&self.waves, || self.build_waves())?,
            Input::Features => try_init(&self.features, || self.build_features())?,
            Input::Representation => {
                let feats = self.get_all(Input::Features)?;
                try_init(&self.reps, || {
                    let f = |clips: &Vec<PreparedClip>| -> Result<Vec<PreparedClip>> {
                        clips
                            .iter()
                            .map(|c| {
                                Ok(PreparedClip {
                                    id: c.id.clone(),
                                    label: c.label,
                                    chunks: vec![representation(self.source, &c.chunks)?],
                                })
                            })
                            .collect()
                    };
                    Ok([f(&feats[0])?, f(&feats[1])?, f(&feats[2])?])
                })?
            }
        };
        Ok(&all[index(split)])
    }

    fn get_all(&self, input: Input) -> Result<&Splits> {
        self.get(input, Split::Train)?;
        Ok(match input {
            Input::Waveform => self.waves.get(),
            Input::Features => self.features.get(),
            Input::Representation => self.reps.get(),
        }
        .expect("initialized by get"))
    }

    fn build_waves(&self) -> Result<Splits> {
        let secs = self.source.chunk_seconds();
        let one = |split| -> Result<Vec<PreparedClip>> {
            self.data
                .split(split)
                .iter()
                .map(|c| {
                    let chunks = chunk(&*c.waveform()?, secs)?
                        .into_iter()
                        .map(|ch| {
                            let n = ch.wave.samples.len();
                            Tensor::new(vec![n], ch.wave.samples)
                        })
                        .collect::<Result<_>>()?;
                    Ok(PreparedClip {
                        id: c.id.clone(),
                        label: c.label,
                        chunks,
                    })
                })
                .collect()
        };
        Ok([one(Split::Train)?, one(Split::Val)?, one(Split::Test)?])
    }

    fn build_features(&self) -> Result<Splits> {
        let secs = self.source.chunk_seconds();
        let mel = &self.source.mel;
        let one = |split| -> Result<Vec<PreparedClip>> {
            self.data
                .split(split)
                .iter()
                .map(|c| {
                    let chunks = chunk(&*c.waveform()?, secs)?
                        .iter()
                        .map(|ch| log_mel(&ch.wave, mel).map(|f| f.values))
                        .collect::<Result<_>>()?;
                    Ok(PreparedClip {
                        id: c.id.clone(),
                        label: c.label,
                        chunks,
                    })
                })
                .collect()
        };
        Ok([one(Split::Train)?, one(Split::Val)?, one(Split::Test)?])
    }
}
