use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Clip, ClipAudio, DatasetSplit};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Twelve harmonic tones on a geometric pitch grid, three envelope shapes.
    Source12Tone,
    /// Four two-note chords under class-specific amplitude modulation.
    Target4Texture,
}

impl SyntheticKind {
    pub fn num_classes(self) -> usize {
        match self {
            SyntheticKind::Source12Tone => 12,
            SyntheticKind::Target4Texture => 4,
        }
    }

    fn class_name(self, c: usize) -> String {
        match self {
            SyntheticKind::Source12Tone => format!("tone{c:02}"),
            SyntheticKind::Target4Texture => format!("texture{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: SyntheticKind,
    pub clip_seconds: f64,
    pub seed: u64,
}

/// Pitch grid of the source task: 150 Hz times powers of 1.265.
fn source_fundamental(class: usize) -> f64 {
    150.0 * 1.265f64.powi(class as i32)
}

/// Chord roots and fifths of the target task, with their modulation rates.
const TARGET_CHORDS: [([f64; 2], f64); 4] = [
    ([330.0, 495.0], 2.0),
    ([415.0, 622.0], 3.5),
    ([523.0, 784.0], 5.5),
    ([659.0, 988.0], 8.0),
];

fn harmonic_stack(f0: f64, phase: f64, t: f64) -> f64 {
    [1.0, 0.5, 0.25]
        .iter()
        .enumerate()
        .filter(|(h, _)| f0 * (*h as f64 + 1.0) < f64::from(RATE) / 2.0)
        .map(|(h, a)| a * (2.0 * PI * f0 * (h as f64 + 1.0) * t + phase * (h as f64 + 1.0)).sin())
        .sum()
}

fn render_source<R: Rng>(class: usize, len: usize, rng: &mut R) -> Vec<f32> {
    let f0 = source_fundamental(class) * rng.gen_range(0.985..1.015);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let gain = rng.gen_range(0.25..0.5);
    let envelope_offset = rng.gen_range(0.0..0.5);
    (0..len)
        .map(|i| {
            let t = i as f64 / f64::from(RATE);
            let env = match class % 3 {
                0 => 1.0,
                1 => (-6.0 * ((t + envelope_offset) % 0.5)).exp(),
                _ => 0.6 + 0.4 * (2.0 * PI * 6.0 * t).sin(),
            };
            (gain * env * harmonic_stack(f0, phase, t) / 1.75) as f32
        })
        .collect()
}

fn render_target<R: Rng>(class: usize, len: usize, rng: &mut R) -> Vec<f32> {
    let (notes, am_rate) = TARGET_CHORDS[class];
    let shift = rng.gen_range(0.95..1.05);
    let phases: [f64; 2] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let depth = rng.gen_range(0.3..0.9);
    let gain = rng.gen_range(0.2..0.45);
    (0..len)
        .map(|i| {
            let t = i as f64 / f64::from(RATE);
            let am = 1.0 - depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
            let chord: f64 = notes
                .iter()
                .zip(&phases)
                .map(|(&f, &p)| harmonic_stack(f * shift, p, t))
                .sum();
            (gain * am * chord / 3.5) as f32
        })
        .collect()
}

/// Generates `n_per_class` clips per class and splits each class 70/15/15.
pub fn gen_synthetic(task: &SyntheticTask, n_per_class: usize) -> Result<DatasetSplit> {
    if n_per_class < 3 {
        return Err(Error::config("dataset.synthetic.n_per_class", "must be at least 3"));
    }
    if !(task.clip_seconds > 0.0) {
        return Err(Error::config("dataset.synthetic.clip_seconds", "must be positive"));
    }
    let len = (task.clip_seconds * f64::from(RATE)).round() as usize;
    let n_train = ((n_per_class as f64) * 0.7).round() as usize;
    let n_val = (((n_per_class as f64) * 0.15).round() as usize).max(1);
    let n_train = n_train.min(n_per_class - n_val - 1).max(1);

    let kind_label = format!("{:?}", task.kind);
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let mut split = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        class_names: (0..task.kind.num_classes()).map(|c| task.kind.class_name(c)).collect(),
    };
    for class in 0..task.kind.num_classes() {
        let name = task.kind.class_name(class);
        for i in 0..n_per_class {
            let mut rng = stream_rng(task.seed, &format!("synthetic/{kind_label}/{class}/{i}"));
            let mut samples = match task.kind {
                SyntheticKind::Source12Tone => render_source(class, len, &mut rng),
                SyntheticKind::Target4Texture => render_target(class, len, &mut rng),
            };
            for s in &mut samples {
                *s += noise.sample(&mut rng) as f32;
            }
            let clip = Clip {
                id: format!("{name}/{name}.{i:05}.wav"),
                label: class,
                audio: ClipAudio::Memory(Arc::new(Waveform::new(samples, RATE)?)),
            };
            if i < n_train {
                split.train.push(clip);
            } else if i < n_train + n_val {
                split.val.push(clip);
            } else {
                split.test.push(clip);
            }
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn task(kind: SyntheticKind) -> SyntheticTask {
        SyntheticTask {
            kind,
            clip_seconds: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn split_sizes() {
        let s = gen_synthetic(&task(SyntheticKind::Target4Texture), 20).unwrap();
        assert_eq!(s.sizes(), (56, 12, 12));
        assert_eq!(s.num_classes(), 4);
        assert!(gen_synthetic(&task(SyntheticKind::Target4Texture), 2).is_err());
        let s = gen_synthetic(&task(SyntheticKind::Source12Tone), 3).unwrap();
        assert_eq!(s.sizes(), (12, 12, 12));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&task(SyntheticKind::Source12Tone), 4).unwrap();
        let b = gen_synthetic(&task(SyntheticKind::Source12Tone), 4).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.waveform().unwrap().samples, y.waveform().unwrap().samples);
        }
    }

    fn dominant_bin(w: &Waveform) -> usize {
        let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(f64::from(s), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        (1..buf.len() / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
    }

    #[test]
    fn neighbouring_classes_differ_in_dominant_frequency() {
        for kind in [SyntheticKind::Source12Tone, SyntheticKind::Target4Texture] {
            let s = gen_synthetic(&task(kind), 3).unwrap();
            let per_class: Vec<usize> = (0..kind.num_classes())
                .map(|c| dominant_bin(&s.train.iter().find(|x| x.label == c).unwrap().waveform().unwrap()))
                .collect();
            for pair in per_class.windows(2) {
                assert_ne!(pair[0], pair[1], "{kind:?}: {per_class:?}");
            }
        }
    }

    #[test]
    fn tasks_share_no_pitches() {
        for c in 0..12 {
            let f = source_fundamental(c);
            for (notes, _) in TARGET_CHORDS {
                assert!(notes.iter().all(|&n| (n - f).abs() > 1.0));
            }
        }
    }
}
