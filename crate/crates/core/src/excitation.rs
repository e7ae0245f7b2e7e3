//! Auditory frequency scales, excitation-pattern smoothing and linear
//! hearing-loss compensation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, FrameSpectrum, StftConfig, StftProcessor};
use crate::error::{Error, Result};

/// Excitation powers below this (-100 dB re unit power) are clamped before
/// conversion to dB.
pub const SILENCE_FLOOR_POWER: f64 = 1e-10;

/// Equivalent rectangular bandwidth of the normal auditory filter at `f_hz`.
pub fn erb_hz(f_hz: f64) -> Result<f64> {
    check_freq(f_hz)?;
    Ok(24.7 * (4.37 * f_hz / 1000.0 + 1.0))
}

/// ERB_N-number (Cam) of `f_hz`.
pub fn erb_number(f_hz: f64) -> Result<f64> {
    check_freq(f_hz)?;
    Ok(21.4 * (4.37 * f_hz / 1000.0 + 1.0).log10())
}

/// Inverse of [`erb_number`].
pub fn freq_of_erb_number(cams: f64) -> Result<f64> {
    if !(cams >= 0.0) {
        return Err(Error::Domain(format!("ERB number must be >= 0, got {cams}")));
    }
    Ok((10f64.powf(cams / 21.4) - 1.0) * 1000.0 / 4.37)
}

fn check_freq(f_hz: f64) -> Result<()> {
    if !(f_hz >= 0.0) || !f_hz.is_finite() {
        return Err(Error::Domain(format!("frequency must be finite and >= 0, got {f_hz}")));
    }
    Ok(())
}

/// Rounded-exponential filter weight at normalized deviation `g`.
pub fn roex_weight(p: f64, g: f64) -> f64 {
    let pg = p * g.abs();
    (1.0 + pg) * (-pg).exp()
}

/// Filter center used for bin `k`. The DC bin has no meaningful auditory
/// filter, so it borrows a center half a bin above zero.
pub(crate) fn filter_center(bin_freqs: &[f64], k: usize) -> f64 {
    let half_bin = if bin_freqs.len() > 1 {
        0.5 * (bin_freqs[1] - bin_freqs[0])
    } else {
        0.5
    };
    bin_freqs[k].max(half_bin)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationPattern {
    pub level_db: Vec<f64>,
    pub bin_freqs_hz: Vec<f64>,
}

/// Roex filters centred on every FFT bin, each normalized to unit total
/// weight so a flat spectrum stays flat.
#[derive(Debug, Clone)]
pub struct ExcitationFilterbank {
    bin_freqs: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl ExcitationFilterbank {
    pub fn new(bin_freqs: &[f64]) -> Result<Self> {
        if bin_freqs.is_empty() {
            return Err(Error::MalformedInput("empty bin grid".into()));
        }
        let mut weights = Vec::with_capacity(bin_freqs.len());
        for k in 0..bin_freqs.len() {
            let fc = filter_center(bin_freqs, k);
            let p = 4.0 * fc / erb_hz(fc)?;
            let mut row: Vec<f64> = bin_freqs
                .iter()
                .map(|&f| roex_weight(p, (f - fc) / fc))
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
            weights.push(row);
        }
        Ok(Self {
            bin_freqs: bin_freqs.to_vec(),
            weights,
        })
    }

    pub fn for_config(config: &StftConfig, sample_rate_hz: u32) -> Result<Self> {
        Self::new(&config.bin_freqs(sample_rate_hz))
    }

    pub fn bin_freqs(&self) -> &[f64] {
        &self.bin_freqs
    }

    pub fn apply(&self, spec: &FrameSpectrum) -> Result<ExcitationPattern> {
        if spec.n_bins() != self.bin_freqs.len() {
            return Err(Error::MalformedInput(format!(
                "spectrum has {} bins, filterbank {}",
                spec.n_bins(),
                self.bin_freqs.len()
            )));
        }
        let power: Vec<f64> = spec.power().collect();
        let level_db = self
            .weights
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                10.0 * e.max(SILENCE_FLOOR_POWER).log10()
            })
            .collect();
        Ok(ExcitationPattern {
            level_db,
            bin_freqs_hz: self.bin_freqs.clone(),
        })
    }
}

/// Excitation pattern of one frame on its own bin grid.
pub fn excitation_pattern(spec: &FrameSpectrum, bin_freqs: &[f64]) -> Result<ExcitationPattern> {
    if spec.n_bins() == 0 {
        return Err(Error::MalformedInput("spectrum has no bins".into()));
    }
    ExcitationFilterbank::new(bin_freqs)?.apply(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudiogramPoint {
    pub freq_hz: f64,
    pub hl_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AudiogramPoint>", into = "Vec<AudiogramPoint>")]
pub struct Audiogram {
    points: Vec<AudiogramPoint>,
}

impl Audiogram {
    pub fn new(points: Vec<AudiogramPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config(format!(
                "audiogram needs at least 2 points, got {}",
                points.len()
            )));
        }
        for w in points.windows(2) {
            if !(w[1].freq_hz > w[0].freq_hz) {
                return Err(Error::Config("audiogram frequencies must strictly increase".into()));
            }
        }
        for p in &points {
            if !(p.freq_hz > 0.0) {
                return Err(Error::Config("audiogram frequencies must be positive".into()));
            }
            if !(0.0..=120.0).contains(&p.hl_db) {
                return Err(Error::Config(format!(
                    "hearing level {} dB outside [0, 120]",
                    p.hl_db
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let points: Vec<AudiogramPoint> = serde_json::from_str(&text)?;
        Self::new(points)
    }

    pub fn points(&self) -> &[AudiogramPoint] {
        &self.points
    }

    /// Hearing level at `f_hz`, linear in log-frequency between points and
    /// held constant beyond the ends.
    pub fn hearing_level(&self, f_hz: f64) -> f64 {
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        if f_hz <= first.freq_hz {
            return first.hl_db;
        }
        if f_hz >= last.freq_hz {
            return last.hl_db;
        }
        let i = self.points.partition_point(|p| p.freq_hz <= f_hz);
        let (lo, hi) = (self.points[i - 1], self.points[i]);
        let t = (f_hz / lo.freq_hz).ln() / (hi.freq_hz / lo.freq_hz).ln();
        lo.hl_db + t * (hi.hl_db - lo.hl_db)
    }
}

impl TryFrom<Vec<AudiogramPoint>> for Audiogram {
    type Error = Error;

    fn try_from(points: Vec<AudiogramPoint>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<Audiogram> for Vec<AudiogramPoint> {
    fn from(a: Audiogram) -> Self {
        a.points
    }
}

/// Linear insertion gain of the Cambridge formula, reduced to 0.48 x HL.
pub const CAMBRIDGE_HL_SLOPE: f64 = 0.48;

pub fn cambridge_gain(audiogram: &Audiogram, bin_freqs: &[f64]) -> Vec<f64> {
    bin_freqs
        .iter()
        .map(|&f| CAMBRIDGE_HL_SLOPE * audiogram.hearing_level(f))
        .collect()
}

/// Fixed per-bin magnitude scaling through analysis/resynthesis.
pub fn apply_linear_gain(
    buffer: &AudioBuffer,
    gain_db_per_bin: &[f64],
    config: StftConfig,
) -> Result<AudioBuffer> {
    let proc = StftProcessor::new(config)?;
    if gain_db_per_bin.len() != config.n_bins() {
        return Err(Error::Config(format!(
            "gain curve has {} bins, analysis has {}",
            gain_db_per_bin.len(),
            config.n_bins()
        )));
    }
    let lin: Vec<f64> = gain_db_per_bin
        .iter()
        .map(|g| 10f64.powf(g / 20.0))
        .collect();
    let mut track = proc.analyze(buffer)?;
    for fr in &mut track.frames {
        for (m, g) in fr.mag.iter_mut().zip(&lin) {
            *m *= g;
        }
    }
    proc.synthesize(&track)
}
