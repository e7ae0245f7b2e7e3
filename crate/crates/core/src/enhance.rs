//! Spectral-change enhancement: frame-to-frame change of the excitation
//! pattern, sharpened by a difference-of-Gaussians kernel on the ERB_N axis,
//! averaged over recent frames and added (scaled) to the original spectrum.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{FrameSpectrum, SpectrumTrack};
use crate::error::{Error, Result};
use crate::excitation::{erb_number, ExcitationFilterbank, ExcitationPattern};

/// Largest boost or cut applied to any bin in one frame.
pub const GAIN_CLAMP_DB: f64 = 20.0;

/// Surround-to-center width ratio of the DoG kernel.
pub const DOG_SURROUND_RATIO: f64 = 1.6;

/// Kernels whose rebalanced center tap falls below this are unresolvable on
/// the bin grid and are replaced by all-zero taps.
const MIN_CENTER_TAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceParams {
    /// DoG width in ERB_N number (Cams).
    pub b: f64,
    /// Per-frame history weight.
    pub xi: f64,
    /// History depth in frames, current frame included.
    pub m: usize,
    /// Enhancement scale.
    pub s: f64,
}

impl SceParams {
    /// Range check for the DSP; the GA grid is stricter (see `ga::ParamGrid`).
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(Error::Config(format!("b must be positive, got {}", self.b)));
        }
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi must be in [0, 1), got {}", self.xi)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if !(self.s >= 0.0) || !self.s.is_finite() {
            return Err(Error::Config(format!("s must be finite and >= 0, got {}", self.s)));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

/// Zero-sum center-surround kernel for one output bin.
#[derive(Debug, Clone, PartialEq)]
pub struct DogKernel {
    pub width_b: f64,
    pub center_bin: usize,
    /// Weight of every bin of the grid for this center.
    pub taps: Vec<f64>,
    sigma_c: f64,
    surround_gain: f64,
    norm: f64,
}

impl DogKernel {
    /// Kernel value at ERB_N distance `d` from the center. Even in `d`.
    pub fn profile(&self, d: f64) -> f64 {
        if self.norm == 0.0 {
            return 0.0;
        }
        let sigma_s = DOG_SURROUND_RATIO * self.sigma_c;
        let c = (-d * d / (2.0 * self.sigma_c * self.sigma_c)).exp();
        let s = (-d * d / (2.0 * sigma_s * sigma_s)).exp();
        (c - s) / self.norm + s
    }

    /// Whether the kernel had to be zeroed because its center is narrower
    /// than the local bin spacing.
    pub fn is_degenerate(&self) -> bool {
        self.norm == 0.0
    }
}

/// Builds the DoG kernel centred on `center_bin`. The surround amplitude is
/// rebalanced so the taps sum to exactly zero over the grid; the center tap
/// is then scaled to 1.
pub fn dog_kernel(b: f64, bin_freqs: &[f64], center_bin: usize) -> Result<DogKernel> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!("DoG width must be positive, got {b}")));
    }
    if center_bin >= bin_freqs.len() {
        return Err(Error::MalformedInput(format!(
            "center bin {center_bin} outside grid of {}",
            bin_freqs.len()
        )));
    }
    let sigma_c = b / 2.0;
    let sigma_s = DOG_SURROUND_RATIO * sigma_c;
    let e0 = erb_number(bin_freqs[center_bin])?;
    let mut center = Vec::with_capacity(bin_freqs.len());
    let mut surround = Vec::with_capacity(bin_freqs.len());
    for &f in bin_freqs {
        let d = erb_number(f)? - e0;
        center.push((-d * d / (2.0 * sigma_c * sigma_c)).exp());
        surround.push((-d * d / (2.0 * sigma_s * sigma_s)).exp());
    }
    let surround_total: f64 = surround.iter().sum();
    let surround_gain = center.iter().sum::<f64>() / surround_total;
    // 1 - surround_gain, summed termwise: narrow kernels have a gain within
    // ulps of 1 and the direct difference would cancel
    let excess: f64 = surround.iter().zip(&center).map(|(s, c)| s - c).sum();
    let peak = excess / surround_total;
    let (taps, norm) = if peak > MIN_CENTER_TAP {
        // (c - g s) / peak rewritten as (c - s) / peak + s for the same reason
        let mut taps: Vec<f64> = center
            .iter()
            .zip(&surround)
            .map(|(c, s)| (c - s) / peak + s)
            .collect();
        // remove the last few ulps of residual so the sum is zero to rounding
        let residual: f64 = taps.iter().sum::<f64>() / taps.len() as f64;
        taps.iter_mut().for_each(|t| *t -= residual);
        (taps, peak)
    } else {
        (vec![0.0; bin_freqs.len()], 0.0)
    };
    Ok(DogKernel {
        width_b: b,
        center_bin,
        taps,
        sigma_c,
        surround_gain,
        norm,
    })
}

/// One DoG kernel per output bin.
#[derive(Debug, Clone)]
pub struct DogBank {
    kernels: Vec<DogKernel>,
}

impl DogBank {
    pub fn new(b: f64, bin_freqs: &[f64]) -> Result<Self> {
        let kernels = (0..bin_freqs.len())
            .map(|k| dog_kernel(b, bin_freqs, k))
            .collect::<Result<_>>()?;
        Ok(Self { kernels })
    }

    pub fn kernels(&self) -> &[DogKernel] {
        &self.kernels
    }

    pub fn n_bins(&self) -> usize {
        self.kernels.len()
    }
}

/// Per-bin level difference (dB) between two adjacent excitation patterns.
pub fn spectral_change(prev: &ExcitationPattern, cur: &ExcitationPattern) -> Result<Vec<f64>> {
    if prev.level_db.len() != cur.level_db.len() {
        return Err(Error::MalformedInput(format!(
            "excitation patterns have {} and {} bins",
            prev.level_db.len(),
            cur.level_db.len()
        )));
    }
    Ok(cur
        .level_db
        .iter()
        .zip(&prev.level_db)
        .map(|(c, p)| c - p)
        .collect())
}

/// ENF: the spectral change filtered by each bin's DoG kernel. Bins beyond
/// the grid contribute nothing.
pub fn enhancement_function(change: &[f64], bank: &DogBank) -> Result<Vec<f64>> {
    if change.len() != bank.n_bins() {
        return Err(Error::MalformedInput(format!(
            "change vector has {} bins, kernel bank {}",
            change.len(),
            bank.n_bins()
        )));
    }
    Ok(bank
        .kernels
        .iter()
        .map(|k| k.taps.iter().zip(change).map(|(t, c)| t * c).sum())
        .collect())
}

/// Rolling ENF history for the xi-weighted gain average.
#[derive(Debug, Clone)]
pub struct EnhancementState {
    params: SceParams,
    history: VecDeque<Vec<f64>>,
    weight_total: f64,
}

impl EnhancementState {
    pub fn new(params: SceParams) -> Result<Self> {
        params.validate()?;
        let weight_total = (0..params.m).map(|i| params.xi.powi(i as i32)).sum();
        Ok(Self {
            params,
            history: VecDeque::with_capacity(params.m),
            weight_total,
        })
    }

    pub fn params(&self) -> &SceParams {
        &self.params
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }

    /// Pushes `enf_cur` and returns Gain_n. Missing history counts as zero.
    pub fn accumulate(&mut self, enf_cur: Vec<f64>) -> Result<Vec<f64>> {
        if let Some(front) = self.history.front() {
            if front.len() != enf_cur.len() {
                return Err(Error::MalformedInput("ENF length changed mid-stream".into()));
            }
        }
        if self.history.len() == self.params.m {
            self.history.pop_back();
        }
        self.history.push_front(enf_cur);
        let n = self.history[0].len();
        let mut gain = vec![0.0; n];
        let mut w = 1.0;
        for enf in &self.history {
            for (g, e) in gain.iter_mut().zip(enf) {
                *g += w * e;
            }
            w *= self.params.xi;
        }
        gain.iter_mut().for_each(|g| *g /= self.weight_total);
        Ok(gain)
    }
}

/// Spec_mod: original magnitudes with `s_n * gain` dB added, clamped to
/// +/- [`GAIN_CLAMP_DB`]. Phase, DC and Nyquist bins are untouched.
pub fn apply_enhancement(spec_org: &FrameSpectrum, gain: &[f64], s_n: f64) -> Result<FrameSpectrum> {
    if !(s_n >= 0.0) {
        return Err(Error::Config(format!("enhancement scale must be >= 0, got {s_n}")));
    }
    if gain.len() != spec_org.n_bins() {
        return Err(Error::MalformedInput(format!(
            "gain has {} bins, spectrum {}",
            gain.len(),
            spec_org.n_bins()
        )));
    }
    let mut out = spec_org.clone();
    if s_n == 0.0 {
        return Ok(out);
    }
    let n = out.mag.len();
    for k in 1..n.saturating_sub(1) {
        let db = (s_n * gain[k]).clamp(-GAIN_CLAMP_DB, GAIN_CLAMP_DB);
        out.mag[k] *= 10f64.powf(db / 20.0);
    }
    Ok(out)
}

/// Output of a full enhancement pass.
#[derive(Debug, Clone)]
pub struct EnhancementRun {
    pub track: SpectrumTrack,
    /// Gain_n (before scaling) for every frame.
    pub gains_db: Vec<Vec<f64>>,
    /// Scale actually applied to each frame.
    pub applied_scale: Vec<f64>,
}

impl EnhancementRun {
    /// Applied dB change per frame and bin (clamped, interior bins only).
    pub fn applied_db(&self) -> impl Iterator<Item = f64> + '_ {
        self.gains_db
            .iter()
            .zip(&self.applied_scale)
            .filter(|(_, &s)| s > 0.0)
            .flat_map(|(g, &s)| {
                let n = g.len();
                g[1..n - 1]
                    .iter()
                    .map(move |x| (s * x).clamp(-GAIN_CLAMP_DB, GAIN_CLAMP_DB))
            })
    }
}

/// Precomputed filterbank and kernels for one parameter set and bin grid.
#[derive(Debug, Clone)]
pub struct Enhancer {
    params: SceParams,
    filterbank: ExcitationFilterbank,
    dog: DogBank,
}

impl Enhancer {
    pub fn new(params: SceParams, bin_freqs: &[f64]) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            filterbank: ExcitationFilterbank::new(bin_freqs)?,
            dog: DogBank::new(params.b, bin_freqs)?,
        })
    }

    pub fn params(&self) -> &SceParams {
        &self.params
    }

    pub fn filterbank(&self) -> &ExcitationFilterbank {
        &self.filterbank
    }

    pub fn dog_bank(&self) -> &DogBank {
        &self.dog
    }

    /// Runs the per-frame chain in order. The ENF history advances on every
    /// frame; `s_schedule[n]` only scales what is applied to frame n.
    pub fn run(&self, track: &SpectrumTrack, s_schedule: &[f64]) -> Result<EnhancementRun> {
        if s_schedule.len() != track.len() {
            return Err(Error::Config(format!(
                "schedule has {} entries for {} frames",
                s_schedule.len(),
                track.len()
            )));
        }
        if track.frames.first().map(|f| f.n_bins()) != Some(self.dog.n_bins()) {
            return Err(Error::MalformedTrack("bin grid differs from enhancer".into()));
        }
        let mut state = EnhancementState::new(self.params)?;
        let mut prev: Option<ExcitationPattern> = None;
        let mut frames = Vec::with_capacity(track.len());
        let mut gains = Vec::with_capacity(track.len());
        for (fr, &s_n) in track.frames.iter().zip(s_schedule) {
            let mag = self.filterbank.apply(fr)?;
            let change = match &prev {
                Some(p) => spectral_change(p, &mag)?,
                None => vec![0.0; fr.n_bins()],
            };
            let enf = enhancement_function(&change, &self.dog)?;
            let gain = state.accumulate(enf)?;
            frames.push(apply_enhancement(fr, &gain, s_n)?);
            gains.push(gain);
            prev = Some(mag);
        }
        Ok(EnhancementRun {
            track: SpectrumTrack {
                frames,
                config: track.config,
                sample_rate_hz: track.sample_rate_hz,
                n_source_samples: track.n_source_samples,
            },
            gains_db: gains,
            applied_scale: s_schedule.to_vec(),
        })
    }
}

pub fn enhance_track(
    track: &SpectrumTrack,
    params: SceParams,
    s_schedule: &[f64],
) -> Result<SpectrumTrack> {
    Ok(Enhancer::new(params, &track.bin_freqs())?
        .run(track, s_schedule)?
        .track)
}
