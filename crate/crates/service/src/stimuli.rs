//! Audio sources named in session configs, and the content-addressed store
//! that serves rendered stimuli.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use sce_core::audio::{read_wav, wav_bytes, AudioBuffer, StftConfig, StftProcessor};
use sce_core::enhance::SceParams;
use sce_core::error::{Error, Result};
use sce_core::ga::Genome;
use sce_core::mixing::{mix_at_smr, MixSpec};
use sce_core::pipeline::{Processing, Stimulus};
use sce_core::synth::{self, SpeechLikeConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

fn default_duration() -> f64 {
    2.0
}

fn default_rms() -> f64 {
    0.05
}

/// Where a signal comes from: a WAV file under the stimulus directory or a
/// deterministic synthetic signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Source {
    Wav {
        path: String,
    },
    SpeechLike {
        seed: u64,
        #[serde(default = "default_duration")]
        duration_s: f64,
    },
    WhiteNoise {
        seed: u64,
        #[serde(default = "default_duration")]
        duration_s: f64,
        #[serde(default = "default_rms")]
        rms: f64,
    },
    Babble {
        seed: u64,
        #[serde(default = "default_duration")]
        duration_s: f64,
        talkers: usize,
    },
}

impl Source {
    pub fn load(&self, stimulus_dir: &Path, rate: u32) -> Result<AudioBuffer> {
        let buf = match self {
            Source::Wav { path } => {
                let rel = Path::new(path);
                if rel.is_absolute() || rel.components().any(|c| c.as_os_str() == "..") {
                    return Err(Error::Config(format!(
                        "stimulus path {path:?} must stay inside the stimulus directory"
                    )));
                }
                read_wav(stimulus_dir.join(rel))?
            }
            Source::SpeechLike { seed, duration_s } => synth::speech_like(
                &SpeechLikeConfig {
                    duration_s: *duration_s,
                    sample_rate_hz: rate,
                    ..Default::default()
                },
                *seed,
            )?,
            Source::WhiteNoise {
                seed,
                duration_s,
                rms,
            } => synth::white_noise((duration_s * rate as f64).round() as usize, rate, *rms, *seed),
            Source::Babble {
                seed,
                duration_s,
                talkers,
            } => synth::babble(
                *talkers,
                &SpeechLikeConfig {
                    duration_s: *duration_s,
                    sample_rate_hz: rate,
                    ..Default::default()
                },
                *seed,
            )?,
        };
        buf.require_rate(rate)?;
        Ok(buf)
    }
}

/// A target and masker mixed at an SMR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSource {
    pub target: Source,
    pub masker: Source,
    pub smr_db: f64,
}

impl MixedSource {
    pub fn render(&self, stimulus_dir: &Path, rate: u32) -> Result<Stimulus> {
        let t = self.target.load(stimulus_dir, rate)?;
        let m = self.masker.load(stimulus_dir, rate)?;
        let spec = MixSpec {
            smr_db: self.smr_db,
            ..Default::default()
        };
        Ok(mix_at_smr(&t, &m, &spec)?.into())
    }
}

/// Reference signal with everything above `cutoff_hz` removed, the usual
/// low-quality anchor of a rating test.
pub fn lowpass_anchor(reference: &AudioBuffer, cutoff_hz: f64) -> Result<AudioBuffer> {
    let proc = StftProcessor::new(StftConfig::default())?;
    let mut track = proc.analyze(reference)?;
    let freqs = track.bin_freqs();
    for f in &mut track.frames {
        for (m, &hz) in f.mag.iter_mut().zip(&freqs) {
            if hz > cutoff_hz {
                *m = 0.0;
            }
        }
    }
    proc.synthesize(&track)
}

/// What a served stimulus was rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusInfo {
    pub session_id: String,
    pub label: String,
    pub processing: Option<Processing>,
    pub genome: Option<Genome>,
    pub params: Option<SceParams>,
    pub condition: Option<String>,
    pub sentence: Option<String>,
}

#[derive(Debug)]
struct Entry {
    wav: Arc<Vec<u8>>,
    info: StimulusInfo,
}

/// Rendered WAV files keyed by the SHA-256 of their bytes.
#[derive(Debug, Default)]
pub struct StimulusStore {
    entries: Mutex<HashMap<String, Entry>>,
}

impl StimulusStore {
    /// Stores the WAV encoding of `audio` and returns its token. Identical
    /// audio maps to the same token; the first description is kept.
    pub fn insert(&self, audio: &AudioBuffer, info: StimulusInfo) -> Result<String> {
        let wav = wav_bytes(audio)?;
        let token = hex::encode(Sha256::digest(&wav));
        self.entries
            .lock()
            .expect("stimulus store poisoned")
            .entry(token.clone())
            .or_insert(Entry {
                wav: Arc::new(wav),
                info,
            });
        Ok(token)
    }

    pub fn wav(&self, token: &str) -> Option<Arc<Vec<u8>>> {
        self.entries
            .lock()
            .expect("stimulus store poisoned")
            .get(token)
            .map(|e| e.wav.clone())
    }

    pub fn info(&self, token: &str) -> Option<StimulusInfo> {
        self.entries
            .lock()
            .expect("stimulus store poisoned")
            .get(token)
            .map(|e| e.info.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("stimulus store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
