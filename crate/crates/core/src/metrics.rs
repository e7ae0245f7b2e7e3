//! Frame activity masks and distance/correlation measures shared by the GA
//! fitness and the SNR benchmark.

use crate::audio::{AudioBuffer, StftConfig, StftProcessor};
use crate::error::{Error, Result};

/// Frames within this many dB of the loudest frame count as speech-active.
pub const ACTIVITY_RANGE_DB: f64 = 35.0;

const POWER_FLOOR: f64 = 1e-12;

/// Windowed frame energies aligned with the STFT framing.
pub fn frame_energies(buffer: &AudioBuffer, config: StftConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let n = config.frame_count(buffer.len());
    if n == 0 {
        return Err(Error::InputTooShort {
            len: buffer.len(),
            frame_len: config.frame_len,
        });
    }
    let w = config.window.coefficients(config.frame_len);
    let x = buffer.samples();
    Ok((0..n)
        .map(|f| {
            let start = f * config.hop;
            w.iter()
                .enumerate()
                .map(|(i, wi)| (wi * x[start + i]).powi(2))
                .sum()
        })
        .collect())
}

/// Frames whose energy is within [`ACTIVITY_RANGE_DB`] of the peak frame.
pub fn activity_mask(buffer: &AudioBuffer, config: StftConfig) -> Result<Vec<bool>> {
    let e = frame_energies(buffer, config)?;
    let peak = e.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(vec![false; e.len()]);
    }
    let thresh = peak * 10f64.powf(-ACTIVITY_RANGE_DB / 10.0);
    Ok(e.iter().map(|&v| v > thresh).collect())
}

/// Mean over masked frames of the per-frame RMS difference of the dB power
/// spectra of `a` and `b`.
pub fn log_spectral_distance(
    a: &AudioBuffer,
    b: &AudioBuffer,
    mask: &[bool],
    config: StftConfig,
) -> Result<f64> {
    if a.len() != b.len() || a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(Error::Alignment(format!(
            "signals differ: {} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let proc = StftProcessor::new(config)?;
    let ta = proc.analyze(a)?;
    let tb = proc.analyze(b)?;
    if mask.len() != ta.len() {
        return Err(Error::Alignment(format!(
            "mask has {} frames, signals {}",
            mask.len(),
            ta.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((fa, fb), &active) in ta.frames.iter().zip(&tb.frames).zip(mask) {
        if !active {
            continue;
        }
        let msd: f64 = fa
            .power()
            .zip(fb.power())
            .map(|(pa, pb)| {
                let d = 10.0 * (pa.max(POWER_FLOOR) / pb.max(POWER_FLOOR)).log10();
                d * d
            })
            .sum::<f64>()
            / fa.n_bins() as f64;
        total += msd.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData("no active frames".into()));
    }
    Ok(total / count as f64)
}

/// Pearson correlation; `None` when either side has zero variance or the
/// inputs are empty.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
