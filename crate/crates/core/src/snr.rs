//! Per-frame instantaneous SNR: ideal (from separate stems), estimated (from
//! the mixture alone), and the threshold gate that turns an SNR track into a
//! per-frame enhancement scale.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, StftConfig, StftProcessor};
use crate::enhance::SceParams;
use crate::error::{Error, Result};
use crate::excitation::{erb_number, freq_of_erb_number};
use crate::metrics::{frame_energies, pearson};
use crate::synth;

#[derive(Debug, Clone, PartialEq)]
pub struct SnrTrack {
    /// dB per frame; +/-inf are legal.
    pub snr_db: Vec<f64>,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
}

impl SnrTrack {
    pub fn len(&self) -> usize {
        self.snr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty()
    }

    /// Start time of frame `i` in seconds.
    pub fn frame_time_s(&self, i: usize) -> f64 {
        (i * self.config.hop) as f64 / self.sample_rate_hz as f64
    }

    /// `frame_index,time_s,snr_db` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,time_s,snr_db\n");
        for (i, v) in self.snr_db.iter().enumerate() {
            let _ = writeln!(out, "{i},{:.6},{}", self.frame_time_s(i), fmt_db(*v));
        }
        out
    }
}

pub(crate) fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold_db: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { threshold_db: 0.0 }
    }
}

/// Enhancement scale for one frame: `s` when `snr_db >= T`, else 0.
pub fn gate_scale(snr_db: f64, s: f64, gate: GateConfig) -> f64 {
    if snr_db >= gate.threshold_db {
        s
    } else {
        0.0
    }
}

pub fn schedule_from_snr(snr: &SnrTrack, params: &SceParams, gate: GateConfig) -> Vec<f64> {
    snr.snr_db
        .iter()
        .map(|&v| gate_scale(v, params.s, gate))
        .collect()
}

/// Ideal per-frame SNR from the separate target and masker, over the same
/// windowed spans the STFT analyses.
pub fn isnr_track(target: &AudioBuffer, masker: &AudioBuffer, config: StftConfig) -> Result<SnrTrack> {
    if target.len() != masker.len() {
        return Err(Error::Alignment(format!(
            "target has {} samples, masker {}",
            target.len(),
            masker.len()
        )));
    }
    if target.sample_rate_hz() != masker.sample_rate_hz() {
        return Err(Error::Alignment(format!(
            "target at {} Hz, masker at {} Hz",
            target.sample_rate_hz(),
            masker.sample_rate_hz()
        )));
    }
    let et = frame_energies(target, config)?;
    let em = frame_energies(masker, config)?;
    let snr_db = et
        .iter()
        .zip(&em)
        .map(|(&t, &m)| {
            if t == 0.0 {
                f64::NEG_INFINITY
            } else if m == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (t / m).log10()
            }
        })
        .collect();
    Ok(SnrTrack {
        snr_db,
        config,
        sample_rate_hz: target.sample_rate_hz(),
    })
}

/// Source of a per-frame SNR track for a mixture.
pub trait SnrEstimator {
    fn name(&self) -> &str;
    fn estimate(&self, mixture: &AudioBuffer, config: StftConfig) -> Result<SnrTrack>;
}

/// Oracle estimator that ignores the mixture and returns the ideal SNR of
/// known stems. Used to sanity-check benchmark plumbing.
pub struct IdealSnr<'a> {
    pub target: &'a AudioBuffer,
    pub masker: &'a AudioBuffer,
}

impl SnrEstimator for IdealSnr<'_> {
    fn name(&self) -> &str {
        "isnr"
    }

    fn estimate(&self, _mixture: &AudioBuffer, config: StftConfig) -> Result<SnrTrack> {
        isnr_track(self.target, self.masker, config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsnrConfig {
    pub n_bands: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Envelope smoothing time constant.
    pub fast_ms: f64,
    /// Minimum-statistics search window for the noise floor.
    pub slow_ms: f64,
    /// Pre-smoothing applied before the minimum search.
    pub floor_smoothing_ms: f64,
    pub mod_low_hz: f64,
    pub mod_high_hz: f64,
    /// Window over which intensity change, modulation and duration are measured.
    pub duration_ms: f64,
    /// Level above the floor that counts as elevated for the duration index.
    pub elevation_db: f64,
    /// Exponents of the (intensity, modulation, duration) sub-indexes in the
    /// weighted-product combiner.
    pub weights: [f64; 3],
    /// Penalty applied to a band's SNR when its speech index is 0.
    pub discount_db: f64,
    /// Lowest band SNR reported.
    pub min_band_snr_db: f64,
    pub max_band_snr_db: f64,
    pub band_average: BandAverage,
}

/// How band SNRs are combined into the frame value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandAverage {
    /// Arithmetic mean of the band SNRs in dB.
    Decibel,
    /// Mean of the linear band SNRs weighted by each band's noise-floor
    /// power, i.e. estimated total speech power over total noise power.
    NoiseWeighted,
}

impl Default for EsnrConfig {
    fn default() -> Self {
        Self {
            n_bands: 16,
            low_hz: 100.0,
            high_hz: 7000.0,
            fast_ms: 10.0,
            slow_ms: 500.0,
            floor_smoothing_ms: 40.0,
            mod_low_hz: 2.0,
            mod_high_hz: 10.0,
            duration_ms: 200.0,
            elevation_db: 3.0,
            weights: [0.3, 0.3, 0.4],
            discount_db: 2.0,
            min_band_snr_db: -20.0,
            max_band_snr_db: 60.0,
            band_average: BandAverage::NoiseWeighted,
        }
    }
}

impl EsnrConfig {
    pub fn validate(&self, config: &StftConfig, sample_rate_hz: u32) -> Result<()> {
        let frame_rate = sample_rate_hz as f64 / config.hop as f64;
        if self.n_bands < 4 {
            return Err(Error::Config("eSNR needs at least 4 bands".into()));
        }
        if !(self.low_hz > 0.0 && self.high_hz > self.low_hz) {
            return Err(Error::Config("eSNR band range must be increasing and positive".into()));
        }
        if self.high_hz > sample_rate_hz as f64 / 2.0 {
            return Err(Error::Config("eSNR band range exceeds Nyquist".into()));
        }
        for (name, v) in [
            ("fast_ms", self.fast_ms),
            ("slow_ms", self.slow_ms),
            ("floor_smoothing_ms", self.floor_smoothing_ms),
            ("duration_ms", self.duration_ms),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mod_low_hz > 0.0
            && self.mod_high_hz > self.mod_low_hz
            && self.mod_high_hz < frame_rate / 2.0)
        {
            return Err(Error::Config(format!(
                "modulation band must lie within (0, {:.1}) Hz",
                frame_rate / 2.0
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("sub-index weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

/// Per-band internals of an eSNR estimate.
#[derive(Debug, Clone)]
pub struct EsnrAnalysis {
    /// `[band][frame]` SNR in dB after discounting.
    pub band_snr_db: Vec<Vec<f64>>,
    /// `[band][frame]` speech-presence index in [0, 1].
    pub speech_index: Vec<Vec<f64>>,
    pub track: SnrTrack,
}

/// Mixture-only SNR estimator. Each ERB-spaced band gets a fast envelope and
/// a minimum-statistics noise floor; three sub-indexes (intensity change,
/// envelope modulation in the syllabic band, duration of elevation above the
/// floor) are combined into a speech-presence index that discounts the band
/// SNR when speech is unlikely. Frame eSNR is the mean band SNR in dB.
#[derive(Debug, Clone)]
pub struct EnvelopeSnrEstimator {
    pub config: EsnrConfig,
}

const POWER_EPS: f64 = 1e-20;
const CALIBRATION_SECONDS: f64 = 6.0;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;

/// Stationary-noise reference values of the per-band features.
#[derive(Debug, Clone)]
struct Calibration {
    floor_bias: Vec<f64>,
    intensity: Vec<f64>,
    modulation: Vec<f64>,
    duration: Vec<f64>,
}

struct BandFeatures {
    envelope: Vec<f64>,
    floor_min: Vec<f64>,
    intensity: Vec<f64>,
    modulation: Vec<f64>,
}

fn smoothing_coeff(time_ms: f64, frame_rate: f64) -> f64 {
    (-1000.0 / (time_ms * frame_rate)).exp()
}

fn sliding_min(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut dq: VecDeque<usize> = VecDeque::new();
    for (i, &v) in x.iter().enumerate() {
        while dq.back().is_some_and(|&j| x[j] >= v) {
            dq.pop_back();
        }
        dq.push_back(i);
        if dq[0] + window <= i {
            dq.pop_front();
        }
        out.push(x[dq[0]]);
    }
    out
}

fn trailing_mean(x: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= window {
            acc -= x[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

impl Default for EnvelopeSnrEstimator {
    fn default() -> Self {
        Self {
            config: EsnrConfig::default(),
        }
    }
}

impl EnvelopeSnrEstimator {
    pub fn new(config: EsnrConfig) -> Self {
        Self { config }
    }

    /// Bin ranges `[lo, hi)` of the ERB-spaced bands.
    pub fn band_bins(&self, config: &StftConfig, sample_rate_hz: u32) -> Result<Vec<(usize, usize)>> {
        let c = &self.config;
        let df = sample_rate_hz as f64 / config.fft_size as f64;
        let e_lo = erb_number(c.low_hz)?;
        let e_hi = erb_number(c.high_hz)?;
        let n_bins = config.n_bins();
        let mut bands = Vec::with_capacity(c.n_bands);
        for b in 0..c.n_bands {
            let f_lo = freq_of_erb_number(e_lo + (e_hi - e_lo) * b as f64 / c.n_bands as f64)?;
            let f_hi = freq_of_erb_number(e_lo + (e_hi - e_lo) * (b + 1) as f64 / c.n_bands as f64)?;
            let lo = ((f_lo / df).round() as usize).clamp(1, n_bins - 1);
            let hi = ((f_hi / df).round() as usize).clamp(lo + 1, n_bins);
            bands.push((lo, hi));
        }
        Ok(bands)
    }

    fn band_powers(
        &self,
        mixture: &AudioBuffer,
        config: StftConfig,
        bands: &[(usize, usize)],
    ) -> Result<Vec<Vec<f64>>> {
        let track = StftProcessor::new(config)?.analyze(mixture)?;
        Ok(bands
            .iter()
            .map(|&(lo, hi)| {
                track
                    .frames
                    .iter()
                    .map(|fr| fr.mag[lo..hi].iter().map(|m| m * m).sum::<f64>() + POWER_EPS)
                    .collect()
            })
            .collect())
    }

    fn features(&self, power: &[f64], frame_rate: f64) -> BandFeatures {
        let c = &self.config;
        let a_fast = smoothing_coeff(c.fast_ms, frame_rate);
        let a_floor = smoothing_coeff(c.floor_smoothing_ms, frame_rate);
        let a_mod_hi = (-2.0 * std::f64::consts::PI * c.mod_high_hz / frame_rate).exp();
        let a_mod_lo = (-2.0 * std::f64::consts::PI * c.mod_low_hz / frame_rate).exp();
        let win_floor = ((c.slow_ms * frame_rate / 1000.0).round() as usize).max(1);
        let win_dur = ((c.duration_ms * frame_rate / 1000.0).round() as usize).max(1);

        let n = power.len();
        let mut envelope = Vec::with_capacity(n);
        let mut smooth = Vec::with_capacity(n);
        let (mut e, mut s) = (power[0], power[0]);
        for &p in power {
            e = a_fast * e + (1.0 - a_fast) * p;
            s = a_floor * s + (1.0 - a_floor) * p;
            envelope.push(e);
            smooth.push(s);
        }
        let floor_min = sliding_min(&smooth, win_floor);

        let level: Vec<f64> = envelope.iter().map(|v| 10.0 * v.log10()).collect();
        let mut change = vec![0.0; n];
        for i in 1..n {
            change[i] = (level[i] - level[i - 1]).abs();
        }
        let intensity = trailing_mean(&change, win_dur);

        let (mut hi, mut lo) = (level[0], level[0]);
        let mut bp2 = Vec::with_capacity(n);
        for &l in &level {
            hi = a_mod_hi * hi + (1.0 - a_mod_hi) * l;
            lo = a_mod_lo * lo + (1.0 - a_mod_lo) * l;
            bp2.push((hi - lo).powi(2));
        }
        let modulation = trailing_mean(&bp2, win_dur).into_iter().map(f64::sqrt).collect();

        BandFeatures {
            envelope,
            floor_min,
            intensity,
            modulation,
        }
    }

    fn elevated_fraction(&self, f: &BandFeatures, bias: f64, frame_rate: f64) -> Vec<f64> {
        let win_dur = ((self.config.duration_ms * frame_rate / 1000.0).round() as usize).max(1);
        let thresh = 10f64.powf(self.config.elevation_db / 10.0);
        let elevated: Vec<f64> = f
            .envelope
            .iter()
            .zip(&f.floor_min)
            .map(|(e, m)| if *e > thresh * bias * m { 1.0 } else { 0.0 })
            .collect();
        trailing_mean(&elevated, win_dur)
    }

    fn calibrate(&self, config: StftConfig, sample_rate_hz: u32, bands: &[(usize, usize)]) -> Result<Calibration> {
        let len = (CALIBRATION_SECONDS * sample_rate_hz as f64) as usize;
        let noise = synth::white_noise(len, sample_rate_hz, 0.1, CALIBRATION_SEED);
        let frame_rate = sample_rate_hz as f64 / config.hop as f64;
        let powers = self.band_powers(&noise, config, bands)?;
        let settle = ((self.config.slow_ms * frame_rate / 1000.0) as usize).min(powers[0].len() / 2);
        let mut cal = Calibration {
            floor_bias: vec![],
            intensity: vec![],
            modulation: vec![],
            duration: vec![],
        };
        for p in &powers {
            let f = self.features(p, frame_rate);
            let steady = settle..p.len();
            let mean_p = p[steady.clone()].iter().sum::<f64>() / steady.len() as f64;
            let mean_min = f.floor_min[steady.clone()].iter().sum::<f64>() / steady.len() as f64;
            let bias = mean_p / mean_min;
            let dur = self.elevated_fraction(&f, bias, frame_rate);
            let avg = |v: &[f64]| v[steady.clone()].iter().sum::<f64>() / steady.len() as f64;
            cal.intensity.push(avg(&f.intensity));
            cal.modulation.push(avg(&f.modulation));
            cal.duration.push(avg(&dur));
            cal.floor_bias.push(bias);
        }
        Ok(cal)
    }

    pub fn analyze(&self, mixture: &AudioBuffer, config: StftConfig) -> Result<EsnrAnalysis> {
        let rate = mixture.sample_rate_hz();
        config.validate()?;
        self.config.validate(&config, rate)?;
        let bands = self.band_bins(&config, rate)?;
        let cal = self.calibrate(config, rate, &bands)?;
        let powers = self.band_powers(mixture, config, &bands)?;
        let frame_rate = rate as f64 / config.hop as f64;
        let c = &self.config;
        let wsum: f64 = c.weights.iter().sum();
        let w: Vec<f64> = c.weights.iter().map(|x| x / wsum).collect();
        let n_frames = powers[0].len();

        let mut band_snr_db = Vec::with_capacity(bands.len());
        let mut band_noise = Vec::with_capacity(bands.len());
        let mut speech_index = Vec::with_capacity(bands.len());
        for (b, p) in powers.iter().enumerate() {
            let f = self.features(p, frame_rate);
            let dur = self.elevated_fraction(&f, cal.floor_bias[b], frame_rate);
            let mut snr = Vec::with_capacity(n_frames);
            let mut noise_power = Vec::with_capacity(n_frames);
            let mut index = Vec::with_capacity(n_frames);
            for i in 0..n_frames {
                let sub_int = relative_excess(f.intensity[i], cal.intensity[b], 2.0);
                let sub_mod = relative_excess(f.modulation[i], cal.modulation[b], 2.5);
                let sub_dur = ((dur[i] - cal.duration[b]) / (1.0 - cal.duration[b]).max(1e-9))
                    .clamp(0.0, 1.0);
                let idx = sub_int.max(SUB_INDEX_FLOOR).powf(w[0])
                    * sub_mod.max(SUB_INDEX_FLOOR).powf(w[1])
                    * sub_dur.max(SUB_INDEX_FLOOR).powf(w[2]);
                let noise = cal.floor_bias[b] * f.floor_min[i];
                let ratio = f.envelope[i] / noise - 1.0;
                let raw = 10.0 * ratio.max(10f64.powf(c.min_band_snr_db / 10.0)).log10();
                let v = (raw - (1.0 - idx) * c.discount_db).clamp(c.min_band_snr_db, c.max_band_snr_db);
                snr.push(v);
                noise_power.push(noise);
                index.push(idx);
            }
            band_snr_db.push(snr);
            band_noise.push(noise_power);
            speech_index.push(index);
        }
        let snr_db = (0..n_frames)
            .map(|i| match c.band_average {
                BandAverage::Decibel => {
                    band_snr_db.iter().map(|b| b[i]).sum::<f64>() / bands.len() as f64
                }
                BandAverage::NoiseWeighted => {
                    let (mut num, mut den) = (0.0, 0.0);
                    for (snr, noise) in band_snr_db.iter().zip(&band_noise) {
                        num += noise[i] * 10f64.powf(snr[i] / 10.0);
                        den += noise[i];
                    }
                    10.0 * (num / den).log10()
                }
            })
            .collect();
        Ok(EsnrAnalysis {
            band_snr_db,
            speech_index,
            track: SnrTrack {
                snr_db,
                config,
                sample_rate_hz: rate,
            },
        })
    }
}

const SUB_INDEX_FLOOR: f64 = 0.05;

/// 0 at or below the noise reference, 1 at `full_ratio` times it.
fn relative_excess(value: f64, reference: f64, full_ratio: f64) -> f64 {
    if reference <= 0.0 {
        return 1.0;
    }
    ((value / reference - 1.0) / (full_ratio - 1.0)).clamp(0.0, 1.0)
}

impl SnrEstimator for EnvelopeSnrEstimator {
    fn name(&self) -> &str {
        "esnr"
    }

    fn estimate(&self, mixture: &AudioBuffer, config: StftConfig) -> Result<SnrTrack> {
        Ok(self.analyze(mixture, config)?.track)
    }
}

pub fn esnr_track(mixture: &AudioBuffer, config: StftConfig, ecfg: EsnrConfig) -> Result<SnrTrack> {
    EnvelopeSnrEstimator::new(ecfg).estimate(mixture, config)
}

/// Agreement between an estimated and a reference SNR track over selected frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrComparison {
    pub frames: usize,
    pub correlation: Option<f64>,
    pub mean_abs_error_db: f64,
    /// Fraction of frames on the same side of the gate threshold.
    pub gate_agreement: f64,
}

/// Compares tracks over frames where `select` is true and both values are finite.
pub fn compare_tracks(
    estimate: &SnrTrack,
    reference: &SnrTrack,
    select: &[bool],
    gate: GateConfig,
) -> Result<SnrComparison> {
    if estimate.len() != reference.len() || select.len() != estimate.len() {
        return Err(Error::Alignment(format!(
            "tracks have {} / {} frames, selection {}",
            estimate.len(),
            reference.len(),
            select.len()
        )));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut agree = 0usize;
    for i in 0..estimate.len() {
        let (e, r) = (estimate.snr_db[i], reference.snr_db[i]);
        if !select[i] || !e.is_finite() || !r.is_finite() {
            continue;
        }
        if (e >= gate.threshold_db) == (r >= gate.threshold_db) {
            agree += 1;
        }
        xs.push(e);
        ys.push(r);
    }
    if xs.is_empty() {
        return Err(Error::InsufficientData("no comparable frames".into()));
    }
    let mae = xs.iter().zip(&ys).map(|(a, b)| (a - b).abs()).sum::<f64>() / xs.len() as f64;
    Ok(SnrComparison {
        frames: xs.len(),
        correlation: pearson(&xs, &ys),
        mean_abs_error_db: mae,
        gate_agreement: agree as f64 / xs.len() as f64,
    })
}
