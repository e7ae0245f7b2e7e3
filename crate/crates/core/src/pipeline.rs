//! The full processing chain for one stimulus: analysis, optional SNR
//! gating, enhancement and resynthesis.

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, StftConfig, StftProcessor};
use crate::enhance::{Enhancer, SceParams};
use crate::error::{Error, Result};
use crate::snr::{esnr_track, isnr_track, schedule_from_snr, EsnrConfig, GateConfig, SnrTrack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Processing {
    /// Analysis and resynthesis only.
    Unprocessed,
    /// Enhancement at scale `s` on every frame.
    Sce,
    /// Gated by the ideal SNR of the separate stems.
    SceIsnr,
    /// Gated by the SNR estimated from the mixture.
    SceEsnr,
}

impl Processing {
    pub fn needs_stems(self) -> bool {
        self == Processing::SceIsnr
    }

    pub fn label(self) -> &'static str {
        match self {
            Processing::Unprocessed => "unprocessed",
            Processing::Sce => "sce",
            Processing::SceIsnr => "sce_isnr",
            Processing::SceEsnr => "sce_esnr",
        }
    }
}

/// A mixture, optionally with the aligned stems it was built from.
#[derive(Debug, Clone)]
pub struct Stimulus {
    pub mixture: AudioBuffer,
    pub target: Option<AudioBuffer>,
    pub masker: Option<AudioBuffer>,
}

impl Stimulus {
    pub fn from_mixture(mixture: AudioBuffer) -> Self {
        Self {
            mixture,
            target: None,
            masker: None,
        }
    }
}

impl From<crate::mixing::MixResult> for Stimulus {
    fn from(m: crate::mixing::MixResult) -> Self {
        Self {
            mixture: m.mixture,
            target: Some(m.target),
            masker: Some(m.masker),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessOptions {
    pub processing: Processing,
    pub gate: GateConfig,
    pub stft: StftConfig,
    pub esnr: EsnrConfig,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            processing: Processing::SceIsnr,
            gate: GateConfig::default(),
            stft: StftConfig::default(),
            esnr: EsnrConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProcessMetrics {
    pub frames: usize,
    /// Fraction of frames with a nonzero applied scale.
    pub gated_fraction: f64,
    pub mean_abs_gain_db: f64,
    pub max_abs_gain_db: f64,
}

#[derive(Debug, Clone)]
pub struct Processed {
    pub audio: AudioBuffer,
    pub snr: Option<SnrTrack>,
    pub schedule: Vec<f64>,
    pub metrics: ProcessMetrics,
}

pub fn process(stim: &Stimulus, params: SceParams, opts: &ProcessOptions) -> Result<Processed> {
    params.validate()?;
    let proc = StftProcessor::new(opts.stft)?;
    let track = proc.analyze(&stim.mixture)?;
    let n = track.len();
    let snr = match opts.processing {
        Processing::Unprocessed | Processing::Sce => None,
        Processing::SceIsnr => {
            let (t, m) = match (&stim.target, &stim.masker) {
                (Some(t), Some(m)) => (t, m),
                _ => {
                    return Err(Error::Config(
                        "SCE-iSNR needs the separate target and masker".into(),
                    ))
                }
            };
            if t.len() != stim.mixture.len() {
                return Err(Error::Alignment(format!(
                    "stems have {} samples, mixture {}",
                    t.len(),
                    stim.mixture.len()
                )));
            }
            Some(isnr_track(t, m, opts.stft)?)
        }
        Processing::SceEsnr => Some(esnr_track(&stim.mixture, opts.stft, opts.esnr)?),
    };
    let schedule = match (&snr, opts.processing) {
        (_, Processing::Unprocessed) => vec![0.0; n],
        (None, _) => vec![params.s; n],
        (Some(t), _) => schedule_from_snr(t, &params, opts.gate),
    };
    let run = Enhancer::new(params, &track.bin_freqs())?.run(&track, &schedule)?;
    let audio = proc.synthesize(&run.track)?;

    let gated = schedule.iter().filter(|&&s| s > 0.0).count();
    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
    for g in run.applied_db() {
        sum += g.abs();
        max = max.max(g.abs());
        count += 1;
    }
    Ok(Processed {
        audio,
        snr,
        schedule,
        metrics: ProcessMetrics {
            frames: n,
            gated_fraction: if n == 0 { 0.0 } else { gated as f64 / n as f64 },
            mean_abs_gain_db: if count == 0 { 0.0 } else { sum / count as f64 },
            max_abs_gain_db: max,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixing::{mix_at_smr, MixSpec};
    use crate::synth;

    fn stim(smr: f64) -> Stimulus {
        let t = synth::speech_like(&synth::SpeechLikeConfig::default(), 2).unwrap();
        let m = synth::white_noise(40_000, 16_000, 0.05, 3);
        mix_at_smr(&t, &m, &MixSpec { smr_db: smr, ..Default::default() })
            .unwrap()
            .into()
    }

    fn params() -> SceParams {
        SceParams { b: 1.0, xi: 0.9, m: 5, s: 3.0 }
    }

    #[test]
    fn unprocessed_is_plain_resynthesis() {
        let st = stim(0.0);
        let p = process(&st, params(), &ProcessOptions { processing: Processing::Unprocessed, ..Default::default() }).unwrap();
        let plain = crate::audio::istft(&crate::audio::stft(&st.mixture, StftConfig::default()).unwrap()).unwrap();
        assert_eq!(p.audio, plain);
        assert_eq!(p.metrics.gated_fraction, 0.0);
        assert_eq!(p.metrics.max_abs_gain_db, 0.0);
    }

    #[test]
    fn isnr_needs_stems() {
        let st = Stimulus::from_mixture(stim(0.0).mixture);
        assert!(matches!(process(&st, params(), &ProcessOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn infinite_threshold_gates_everything() {
        let st = stim(0.0);
        let mut opts = ProcessOptions::default();
        opts.gate.threshold_db = f64::INFINITY;
        let gated = process(&st, params(), &opts).unwrap();
        let plain = process(&st, params(), &ProcessOptions { processing: Processing::Unprocessed, ..opts }).unwrap();
        assert_eq!(gated.audio, plain.audio);
    }

    #[test]
    fn sce_changes_the_signal() {
        let st = stim(5.0);
        let p = process(&st, params(), &ProcessOptions { processing: Processing::Sce, ..Default::default() }).unwrap();
        assert_eq!(p.metrics.gated_fraction, 1.0);
        assert!(p.metrics.max_abs_gain_db > 0.0);
        assert!(p.metrics.max_abs_gain_db <= crate::enhance::GAIN_CLAMP_DB);
    }
}
