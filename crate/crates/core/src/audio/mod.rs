//! Waveform carrier, WAV I/O and the short-time Fourier analysis/resynthesis
//! that every other stage runs on.

mod stft;
mod wav;

pub use stft::{istft, stft, FrameSpectrum, SpectrumTrack, StftConfig, StftProcessor, Window};
pub use wav::{read_wav, read_wav_at, wav_bytes, write_wav};

use crate::error::{Error, Result};

/// Sample rate assumed throughout the toolkit.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::MalformedInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate_hz,
        )
    }

    /// First `len` samples (or the whole buffer when shorter).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn require_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate_hz != expected {
            return Err(Error::RateMismatch {
                expected,
                found: self.sample_rate_hz,
            });
        }
        Ok(())
    }
}

pub(crate) fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}
