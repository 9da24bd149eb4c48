use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Waveform};
use crate::autodiff::{CustomOp, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Front-end analysis parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    /// Analysis window length in samples (Hann).
    pub window: usize,
    /// Frame advance in samples.
    pub hop: usize,
    /// FFT length; a power of two no shorter than `window`.
    pub fft: usize,
    pub mel_bins: usize,
    /// Added to mel energies before the logarithm.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            window: 400,
            hop: 160,
            fft: 512,
            mel_bins: 64,
            floor: 1e-6,
        }
    }
}

pub const MEL_SAMPLE_RATE: u32 = 16_000;

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("mel.window", "must be positive"));
        }
        if self.hop == 0 {
            return Err(Error::config("mel.hop", "must be positive"));
        }
        if !self.fft.is_power_of_two() || self.fft < self.window {
            return Err(Error::config("mel.fft", "must be a power of two >= window"));
        }
        if self.mel_bins == 0 || self.mel_bins > self.fft / 2 {
            return Err(Error::config("mel.mel_bins", "must be in 1..=fft/2"));
        }
        if !(self.floor > 0.0) {
            return Err(Error::config("mel.floor", "must be positive"));
        }
        Ok(())
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }

    pub fn spectrum_bins(&self) -> usize {
        self.fft / 2 + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with HTK mel spacing between 0 Hz and Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub mel_bins: usize,
    pub spectrum_bins: usize,
    /// Row-major `[mel_bins, spectrum_bins]`.
    pub weights: Vec<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let nyquist = f64::from(MEL_SAMPLE_RATE) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..cfg.mel_bins + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64))
            .collect();
        let bins = cfg.spectrum_bins();
        let bin_hz = f64::from(MEL_SAMPLE_RATE) / cfg.fft as f64;
        let mut weights = vec![0.0; cfg.mel_bins * bins];
        for m in 0..cfg.mel_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Self {
            mel_bins: cfg.mel_bins,
            spectrum_bins: bins,
            weights,
            centers_hz: edges[1..=cfg.mel_bins].to_vec(),
        }
    }
}

pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

struct Analysis<F: Real> {
    frames: usize,
    /// `[frames, spectrum_bins]`
    spectra: Vec<Complex<F>>,
    /// `[mel_bins, frames]`, before the floor and logarithm.
    energy: Vec<F>,
}

fn analyze<F: Real>(samples: &[F], cfg: &MelConfig, bank: &MelFilterbank) -> Result<Analysis<F>> {
    let frames = cfg.frames(samples.len()).ok_or(Error::InputTooShort {
        needed: cfg.window,
        got: samples.len(),
    })?;
    let window: Vec<F> = hann(cfg.window).into_iter().map(F::of).collect();
    let weights: Vec<F> = bank.weights.iter().map(|&w| F::of(w)).collect();
    let bins = cfg.spectrum_bins();
    let fft = FftPlanner::<F>::new().plan_fft_forward(cfg.fft);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft];
    let mut spectra = Vec::with_capacity(frames * bins);
    let mut energy = vec![F::zero(); cfg.mel_bins * frames];
    let mut mags = vec![F::zero(); bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let v = if n < cfg.window {
                samples[start + n] * window[n]
            } else {
                F::zero()
            };
            *slot = Complex::new(v, F::zero());
        }
        fft.process(&mut buf);
        for k in 0..bins {
            mags[k] = buf[k].norm();
            spectra.push(buf[k]);
        }
        for m in 0..cfg.mel_bins {
            let row = &weights[m * bins..(m + 1) * bins];
            energy[m * frames + t] = row.iter().zip(&mags).map(|(&w, &a)| w * a).sum();
        }
    }
    Ok(Analysis {
        frames,
        spectra,
        energy,
    })
}

fn log_floor<F: Real>(energy: &[F], floor: f64) -> Vec<F> {
    let floor = F::of(floor);
    energy.iter().map(|&e| (e + floor).ln()).collect()
}

/// Log-mel spectrogram `[mel_bins, frames]`: magnitude STFT with a Hann
/// window, triangular mel filters, then `ln(x + floor)`.
pub fn log_mel(w: &Waveform, cfg: &MelConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let bank = MelFilterbank::new(cfg);
    let a = analyze(&w.samples, cfg, &bank)?;
    Ok(FeatureMap {
        values: Tensor::new(vec![cfg.mel_bins, a.frames], log_floor(&a.energy, cfg.floor))?,
        hop: cfg.hop,
        window: cfg.window,
    })
}

/// Differentiable log-mel of a 1-d waveform node.
pub fn log_mel_var<F: Real>(tape: &mut Tape<F>, x: Var, cfg: &MelConfig) -> Result<Var> {
    cfg.validate()?;
    if tape.value(x).ndim() != 1 {
        return Err(Error::dim(
            "log_mel",
            format!("waveform must be 1-d, got {:?}", tape.shape(x)),
        ));
    }
    let bank = MelFilterbank::new(cfg);
    let a = analyze(tape.value(x).data(), cfg, &bank)?;
    let out = Tensor::new(vec![cfg.mel_bins, a.frames], log_floor(&a.energy, cfg.floor))?;
    let op = LogMelOp {
        cfg: cfg.clone(),
        weights: bank.weights.iter().map(|&w| F::of(w)).collect(),
        window: hann(cfg.window).into_iter().map(F::of).collect(),
        analysis: a,
    };
    Ok(tape.custom(&[x], out, Box::new(op)))
}

struct LogMelOp<F: Real> {
    cfg: MelConfig,
    weights: Vec<F>,
    window: Vec<F>,
    analysis: Analysis<F>,
}

impl<F: Real> CustomOp<F> for LogMelOp<F> {
    fn name(&self) -> &'static str {
        "log_mel"
    }

    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &[F]) -> Vec<Vec<F>> {
        let cfg = &self.cfg;
        let frames = self.analysis.frames;
        let bins = cfg.spectrum_bins();
        let floor = F::of(cfg.floor);
        let ifft = FftPlanner::<F>::new().plan_fft_inverse(cfg.fft);
        let mut gx = vec![F::zero(); inputs[0].numel()];
        let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft];
        let mut dmag = vec![F::zero(); bins];
        for t in 0..frames {
            dmag.iter_mut().for_each(|v| *v = F::zero());
            for m in 0..cfg.mel_bins {
                let ge = grad[m * frames + t] / (self.analysis.energy[m * frames + t] + floor);
                let row = &self.weights[m * bins..(m + 1) * bins];
                for (d, &w) in dmag.iter_mut().zip(row) {
                    *d += w * ge;
                }
            }
            // d|X_k|/dy_n = Re(X_k / |X_k| * e^{+2 pi i k n / N})
            buf.iter_mut().for_each(|c| *c = Complex::new(F::zero(), F::zero()));
            for k in 0..bins {
                let x = self.analysis.spectra[t * bins + k];
                let norm = x.norm();
                if norm > F::zero() {
                    buf[k] = x * (dmag[k] / norm);
                }
            }
            ifft.process(&mut buf);
            let start = t * cfg.hop;
            for n in 0..cfg.window {
                gx[start + n] += buf[n].re * self.window[n];
            }
        }
        vec![gx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    fn tone(hz: f64, secs: f64) -> Waveform {
        let n = (secs * 16_000.0) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let f = log_mel(&w, &MelConfig::default()).unwrap();
        let floor = (1e-6f64).ln() as f32;
        assert!(f.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = log_mel(&tone(300.0, 1.0), &MelConfig::default()).unwrap();
        assert_eq!(f.values.shape(), &[64, 98]);
        assert_eq!(f.frames(), 98);
    }

    #[test]
    fn tone_peaks_in_nearest_filter() {
        let cfg = MelConfig::default();
        let bank = MelFilterbank::new(&cfg);
        let nearest = (0..cfg.mel_bins)
            .min_by(|&a, &b| {
                (bank.centers_hz[a] - 1000.0)
                    .abs()
                    .total_cmp(&(bank.centers_hz[b] - 1000.0).abs())
            })
            .unwrap();
        let f = log_mel(&tone(1000.0, 1.0), &cfg).unwrap();
        let frames = f.frames();
        for t in [0, frames / 2, frames - 1] {
            let col: Vec<f32> = (0..cfg.mel_bins).map(|m| f.values.data()[m * frames + t]).collect();
            assert_eq!(crate::autodiff::argmax(&col), nearest);
        }
    }

    #[test]
    fn window_longer_than_signal_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            log_mel(&w, &MelConfig::default()),
            Err(Error::InputTooShort { needed: 400, got: 399 })
        ));
    }

    #[test]
    fn filterbank_rows_are_partitions_of_unity_or_less() {
        let bank = MelFilterbank::new(&MelConfig::default());
        for k in 0..bank.spectrum_bins {
            let col: f64 = (0..bank.mel_bins).map(|m| bank.weights[m * bank.spectrum_bins + k]).sum();
            assert!(col <= 1.0 + 1e-6);
        }
        assert!(bank.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn deterministic_bits() {
        let w = tone(523.0, 0.5);
        let a = log_mel(&w, &MelConfig::default()).unwrap();
        let b = log_mel(&w, &MelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_path_matches_plain_path() {
        let w = tone(700.0, 0.3);
        let cfg = MelConfig::default();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(w.samples.clone()));
        let y = log_mel_var(&mut tape, x, &cfg).unwrap();
        assert_eq!(tape.value(y), &log_mel(&w, &cfg).unwrap().values);
    }

    #[test]
    fn fft_round_trip() {
        let signal: Vec<f64> = (0..512).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(512).process(&mut buf);
        let energy_t: f64 = signal.iter().map(|v| v * v).sum();
        let energy_f: f64 = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / 512.0;
        assert!((energy_t - energy_f).abs() / energy_t < 1e-4);
        planner.plan_fft_inverse(512).process(&mut buf);
        for (a, b) in signal.iter().zip(&buf) {
            assert!((a - b.re / 512.0).abs() < 1e-4 * energy_t.sqrt());
        }
    }

    #[test]
    fn log_mel_gradient_matches_finite_differences() {
        let cfg = MelConfig {
            window: 32,
            hop: 16,
            fft: 64,
            mel_bins: 8,
            floor: 1e-6,
        };
        let x: Vec<f64> = (0..96)
            .map(|i| (i as f64 * 0.7).sin() + 0.8 * (i as f64 * 2.3).cos())
            .collect();
        let weights: Vec<f64> = (0..8 * 5).map(|i| ((i * 31) % 11) as f64 / 11.0 - 0.4).collect();
        let r = gradcheck::check(&[Tensor::from_vec(x)], 1e-4, |t, v| {
            let y = log_mel_var(t, v[0], &cfg)?;
            let w = t.constant(Tensor::new(vec![8, 5], weights.clone())?);
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
