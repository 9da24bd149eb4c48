use super::Waveform;
use crate::error::{Error, Result};

/// Fraction of a chunk a trailing remainder must fill to be kept.
pub const DEFAULT_MIN_PARTIAL: f64 = 0.5;

/// One fixed-length piece of a longer waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub wave: Waveform,
    /// Number of leading samples that came from the source; the rest is
    /// zero padding.
    pub valid: usize,
}

/// Number of samples in a chunk of `seconds` at `sample_rate`.
pub fn chunk_len(seconds: f64, sample_rate: u32) -> usize {
    (seconds * f64::from(sample_rate)).round() as usize
}

/// Splits `w` into non-overlapping chunks of `chunk_seconds`.
///
/// Full chunks are always kept. A trailing remainder is zero-padded and kept
/// when it covers at least `min_partial` of a chunk. A waveform shorter than
/// that still yields one padded chunk, so no non-empty input maps to zero
/// chunks.
pub fn chunk_with(w: &Waveform, chunk_seconds: f64, min_partial: f64) -> Result<Vec<Chunk>> {
    if w.samples.is_empty() {
        return Err(Error::EmptyInput("chunk: waveform has no samples"));
    }
    if !(chunk_seconds > 0.0) {
        return Err(Error::Usage(format!("chunk_seconds must be positive, got {chunk_seconds}")));
    }
    let len = chunk_len(chunk_seconds, w.sample_rate);
    if len == 0 {
        return Err(Error::Usage("chunk shorter than one sample".into()));
    }
    let mut chunks: Vec<Chunk> = w
        .samples
        .chunks_exact(len)
        .map(|c| Chunk {
            wave: Waveform {
                samples: c.to_vec(),
                sample_rate: w.sample_rate,
            },
            valid: len,
        })
        .collect();
    let rem = w.samples.len() % len;
    if rem > 0 && (rem as f64 >= min_partial * len as f64 || chunks.is_empty()) {
        let mut samples = w.samples[w.samples.len() - rem..].to_vec();
        samples.resize(len, 0.0);
        chunks.push(Chunk {
            wave: Waveform {
                samples,
                sample_rate: w.sample_rate,
            },
            valid: rem,
        });
    }
    Ok(chunks)
}

pub fn chunk(w: &Waveform, chunk_seconds: f64) -> Result<Vec<Chunk>> {
    chunk_with(w, chunk_seconds, DEFAULT_MIN_PARTIAL)
}

/// Concatenates the non-padding part of each chunk.
pub fn concat_valid(chunks: &[Chunk]) -> Vec<f32> {
    chunks
        .iter()
        .flat_map(|c| c.wave.samples[..c.valid].iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i % 1000) as f32 / 1000.0).collect(), 16_000).unwrap()
    }

    #[test]
    fn thirty_seconds_into_one_second_chunks() {
        let c = chunk(&ramp(30 * 16_000), 1.0).unwrap();
        assert_eq!(c.len(), 30);
        assert!(c.iter().all(|c| c.wave.samples.len() == 16_000));
    }

    #[test]
    fn exact_length_is_identity() {
        let w = ramp(10 * 16_000);
        let c = chunk(&w, 10.0).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].wave, w);
    }

    #[test]
    fn partial_tail_is_padded() {
        let w = ramp(41_600); // 2.6 s
        let c = chunk(&w, 1.0).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2].valid, 9_600);
        assert_eq!(&c[2].wave.samples[..9_600], &w.samples[32_000..]);
        assert!(c[2].wave.samples[9_600..].iter().all(|&s| s == 0.0));
        assert_eq!(c[2].wave.samples.len(), 16_000);
    }

    #[test]
    fn short_tail_is_dropped() {
        let c = chunk(&ramp(16_000 + 4_000), 1.0).unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn empty_input_is_rejected() {
        let w = Waveform {
            samples: vec![],
            sample_rate: 16_000,
        };
        assert!(matches!(chunk(&w, 1.0), Err(Error::EmptyInput(_))));
        assert!(chunk(&ramp(10), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn concatenation_restores_covered_prefix(len in 1usize..40_000, secs in prop::sample::select(vec![0.25, 0.5, 1.0])) {
            let w = ramp(len);
            let chunks = chunk(&w, secs).unwrap();
            let joined = concat_valid(&chunks);
            let cl = chunk_len(secs, 16_000);
            let rem = len % cl;
            let kept_all = rem == 0 || rem * 2 >= cl || len < cl;
            prop_assert_eq!(&joined[..], &w.samples[..joined.len()]);
            if kept_all {
                prop_assert_eq!(joined.len(), len);
            } else {
                prop_assert_eq!(joined.len(), len - rem);
            }
            for c in &chunks {
                prop_assert_eq!(c.wave.samples.len(), cl);
            }
        }
    }
}
