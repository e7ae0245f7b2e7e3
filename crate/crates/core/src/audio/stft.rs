use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hamming,
}

impl Window {
    /// Periodic (DFT-even) window coefficients.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hamming => (0..len)
                .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 256,
            hop: 128,
            fft_size: 256,
            window: Window::Hamming,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(Error::Config(format!(
                "frame_len must be even and >= 2, got {}",
                self.frame_len
            )));
        }
        if self.fft_size != self.frame_len {
            return Err(Error::Config("fft_size must equal frame_len".into()));
        }
        if self.hop != self.frame_len / 2 {
            return Err(Error::Config("hop must be frame_len / 2".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of complete frames in `n_samples` (0 when shorter than a frame).
    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_len {
            0
        } else {
            1 + (n_samples - self.frame_len) / self.hop
        }
    }

    /// Samples spanned by `n_frames` overlapped frames.
    pub fn output_len(&self, n_frames: usize) -> usize {
        if n_frames == 0 {
            0
        } else {
            (n_frames - 1) * self.hop + self.frame_len
        }
    }

    /// Center frequency of every one-sided bin.
    pub fn bin_freqs(&self, sample_rate_hz: u32) -> Vec<f64> {
        let df = sample_rate_hz as f64 / self.fft_size as f64;
        (0..self.n_bins()).map(|k| k as f64 * df).collect()
    }
}

/// One-sided magnitude and phase of a single analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpectrum {
    pub mag: Vec<f64>,
    pub phase: Vec<f64>,
}

impl FrameSpectrum {
    pub fn n_bins(&self) -> usize {
        self.mag.len()
    }

    pub fn power(&self) -> impl Iterator<Item = f64> + '_ {
        self.mag.iter().map(|m| m * m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTrack {
    pub frames: Vec<FrameSpectrum>,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
    pub n_source_samples: usize,
}

impl SpectrumTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bin_freqs(&self) -> Vec<f64> {
        self.config.bin_freqs(self.sample_rate_hz)
    }
}

/// Reusable analysis/synthesis engine with cached FFT plans.
pub struct StftProcessor {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftProcessor {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: config.window.coefficients(config.frame_len),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
            config,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, buffer: &AudioBuffer) -> Result<SpectrumTrack> {
        let cfg = &self.config;
        let x = buffer.samples();
        let n_frames = cfg.frame_count(x.len());
        if n_frames == 0 {
            return Err(Error::InputTooShort {
                len: x.len(),
                frame_len: cfg.frame_len,
            });
        }
        let n_bins = cfg.n_bins();
        let mut scratch = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut frames = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = f * cfg.hop;
            for (i, c) in scratch.iter_mut().enumerate() {
                *c = Complex::new(x[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut scratch);
            frames.push(FrameSpectrum {
                mag: scratch[..n_bins].iter().map(|c| c.norm()).collect(),
                phase: scratch[..n_bins].iter().map(|c| c.arg()).collect(),
            });
        }
        Ok(SpectrumTrack {
            frames,
            config: *cfg,
            sample_rate_hz: buffer.sample_rate_hz(),
            n_source_samples: x.len(),
        })
    }

    /// Overlap-add resynthesis; each output sample is divided by the sum of
    /// analysis-window values that covered it.
    pub fn synthesize(&self, track: &SpectrumTrack) -> Result<AudioBuffer> {
        let cfg = &self.config;
        if track.config != *cfg {
            return Err(Error::MalformedTrack("track config differs from processor".into()));
        }
        if track.frames.is_empty() {
            return Err(Error::MalformedTrack("empty track".into()));
        }
        let n_bins = cfg.n_bins();
        let n = cfg.fft_size;
        for (i, fr) in track.frames.iter().enumerate() {
            if fr.mag.len() != n_bins || fr.phase.len() != n_bins {
                return Err(Error::MalformedTrack(format!(
                    "frame {i} has {} magnitudes / {} phases, expected {n_bins}",
                    fr.mag.len(),
                    fr.phase.len()
                )));
            }
        }
        let out_len = cfg.output_len(track.frames.len());
        let mut out = vec![0.0; out_len];
        let mut wsum = vec![0.0; out_len];
        let mut scratch = vec![Complex::new(0.0, 0.0); n];
        for (f, fr) in track.frames.iter().enumerate() {
            for k in 0..n_bins {
                scratch[k] = Complex::from_polar(fr.mag[k], fr.phase[k]);
            }
            // real signal: imaginary parts at DC and Nyquist carry no information
            scratch[0].im = 0.0;
            scratch[n / 2].im = 0.0;
            for k in n_bins..n {
                scratch[k] = scratch[n - k].conj();
            }
            self.inverse.process(&mut scratch);
            let start = f * cfg.hop;
            for i in 0..cfg.frame_len {
                out[start + i] += scratch[i].re / n as f64;
                wsum[start + i] += self.window[i];
            }
        }
        for (o, w) in out.iter_mut().zip(&wsum) {
            *o /= w;
        }
        AudioBuffer::new(out, track.sample_rate_hz)
    }
}

pub fn stft(buffer: &AudioBuffer, config: StftConfig) -> Result<SpectrumTrack> {
    StftProcessor::new(config)?.analyze(buffer)
}

pub fn istft(track: &SpectrumTrack) -> Result<AudioBuffer> {
    StftProcessor::new(track.config)?.synthesize(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
    }

    #[test]
    fn frame_counts_at_small_lengths() {
        let cfg = StftConfig::default();
        assert_eq!(stft(&noise(256, 1), cfg).unwrap().len(), 1);
        assert_eq!(stft(&noise(512, 1), cfg).unwrap().len(), 3);
    }

    #[test]
    fn short_input_is_rejected() {
        let err = stft(&noise(255, 1), StftConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InputTooShort { len: 255, frame_len: 256 }));
    }

    #[test]
    fn sine_peak_matches_direct_dft() {
        let x: Vec<f64> = (0..1024)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let buf = AudioBuffer::new(x.clone(), 16_000).unwrap();
        let cfg = StftConfig::default();
        let track = stft(&buf, cfg).unwrap();
        let w = Window::Hamming.coefficients(256);
        for (f, fr) in track.frames.iter().enumerate() {
            let peak = fr
                .mag
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, 16);
            // direct discrete-Fourier sum
            for k in [0usize, 5, 16, 40, 128] {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..256 {
                    let v = x[f * 128 + n] * w[n];
                    let ang = -2.0 * PI * (k * n) as f64 / 256.0;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                assert!((fr.mag[k] - re.hypot(im)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_frame_resynthesizes_to_zero() {
        let cfg = StftConfig::default();
        let track = SpectrumTrack {
            frames: vec![FrameSpectrum {
                mag: vec![0.0; 129],
                phase: vec![0.0; 129],
            }],
            config: cfg,
            sample_rate_hz: 16_000,
            n_source_samples: 256,
        };
        let out = istft(&track).unwrap();
        assert_eq!(out.len(), 256);
        assert!(out.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn malformed_track_is_rejected() {
        let mut track = stft(&noise(512, 3), StftConfig::default()).unwrap();
        track.frames[1].phase.pop();
        assert!(matches!(istft(&track), Err(Error::MalformedTrack(_))));
    }

    #[test]
    fn round_trip_white_noise() {
        let buf = noise(4000, 7);
        let out = istft(&stft(&buf, StftConfig::default()).unwrap()).unwrap();
        let n = out.len();
        assert_eq!(n, StftConfig::default().output_len(30));
        let interior = 128..n - 128;
        let err: f64 = interior
            .clone()
            .map(|i| (out.samples()[i] - buf.samples()[i]).powi(2))
            .sum();
        let sig: f64 = interior.map(|i| buf.samples()[i].powi(2)).sum();
        assert!((err / sig).sqrt() < 1e-6);
    }

    #[test]
    fn hop_shift_equivariance_under_modification() {
        // a fixed per-bin modification commutes with whole-hop delays on the interior
        let cfg = StftConfig::default();
        let base = noise(3000, 11);
        let shift = 3 * cfg.hop;
        let mut shifted = vec![0.0; shift];
        shifted.extend_from_slice(base.samples());
        let shifted = AudioBuffer::new(shifted, 16_000).unwrap();
        let modify = |b: &AudioBuffer| {
            let mut t = stft(b, cfg).unwrap();
            for fr in &mut t.frames {
                for (k, m) in fr.mag.iter_mut().enumerate() {
                    *m *= 1.0 + (k % 7) as f64 * 0.1;
                }
            }
            istft(&t).unwrap()
        };
        let a = modify(&base);
        let b = modify(&shifted);
        for i in cfg.frame_len..a.len() - cfg.frame_len {
            assert!((a.samples()[i] - b.samples()[i + shift]).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 256usize..5000) {
            let cfg = StftConfig::default();
            let track = stft(&noise(len, len as u64), cfg).unwrap();
            prop_assert_eq!(track.len(), 1 + (len - 256) / 128);
        }

        #[test]
        fn round_trip_is_identity(len in 256usize..3000, seed in 0u64..1000) {
            let buf = noise(len, seed);
            let out = istft(&stft(&buf, StftConfig::default()).unwrap()).unwrap();
            let n = out.len();
            let err: f64 = (0..n).map(|i| (out.samples()[i] - buf.samples()[i]).powi(2)).sum();
            let sig: f64 = (0..n).map(|i| buf.samples()[i].powi(2)).sum();
            prop_assert!((err / sig).sqrt() < 1e-6);
        }
    }
}
