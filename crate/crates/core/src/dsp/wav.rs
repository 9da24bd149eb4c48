use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

/// Sample rate every waveform is brought to on load.
pub const CANONICAL_RATE: u32 = 16_000;

/// Reads a PCM16 or float32 RIFF/WAVE file, averages channels to mono and
/// resamples to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::format("fmt.channels", "zero channels"));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                "fmt.bits_per_sample",
                format!("unsupported codec {fmt:?} with {bits} bits; expected PCM16 or float32"),
            ))
        }
    };
    let channels = usize::from(spec.channels);
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    Ok(resample_linear(&wave, CANONICAL_RATE))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::format("riff", msg),
        hound::Error::Unsupported => Error::format("fmt.audio_format", "unsupported WAVE codec"),
        other => Error::format("wav", other.to_string()),
    }
}

/// Writes a mono PCM16 file.
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Linear-interpolation resampler.
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    if wave.sample_rate == target_rate || wave.samples.is_empty() {
        return Waveform {
            samples: wave.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let n_in = wave.samples.len();
    let n_out = (n_in as u64 * u64::from(target_rate) / u64::from(wave.sample_rate)) as usize;
    let step = f64::from(wave.sample_rate) / f64::from(target_rate);
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            let frac = (pos - i0 as f64) as f32;
            let a = wave.samples[i0.min(n_in - 1)];
            let b = wave.samples[(i0 + 1).min(n_in - 1)];
            a + (b - a) * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn write_raw(path: &Path, channels: u16, rate: u32, frames: &[Vec<i16>]) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for f in frames {
            for &s in f {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_raw(&p, 1, 16_000, &vec![vec![16384]; 100]);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 100);
        assert!(w.samples.iter().all(|&s| (s - 0.5).abs() < 1e-6));
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let frames: Vec<Vec<i16>> = (0..200).map(|i| vec![(i * 37 % 3000) as i16, -((i * 37 % 3000) as i16)]).collect();
        write_raw(&p, 2, 16_000, &frames);
        let w = load_wav(&p).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn upsampled_sine_keeps_its_pitch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let frames: Vec<Vec<i16>> = (0..8000)
            .map(|i| vec![((2.0 * std::f64::consts::PI * 440.0 * i as f64 / 8000.0).sin() * 20000.0) as i16])
            .collect();
        write_raw(&p, 1, 8000, &frames);
        let w = load_wav(&p).unwrap();
        assert_eq!(w.sample_rate, 16_000);
        assert_eq!(w.samples.len(), 16_000);

        // DFT oracle: 1 s at 16 kHz gives 1 Hz bins.
        let mut buf: Vec<Complex<f64>> = w.samples.iter().map(|&s| Complex::new(f64::from(s), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let peak = (0..8000).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        assert!((peak as i64 - 440).abs() <= 1, "peak bin {peak}");
    }

    #[test]
    fn unsupported_codec_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 8,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        let err = load_wav(&p).unwrap_err();
        assert!(err.to_string().contains("bits_per_sample"), "{err}");
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.wav");
        std::fs::write(&p, b"RIFX0000WAVEjunkjunk").unwrap();
        assert!(matches!(load_wav(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.0, 0.125], 16_000).unwrap();
        write_wav_pcm16(&p, &w).unwrap();
        assert_eq!(load_wav(&p).unwrap(), w);
    }
}
