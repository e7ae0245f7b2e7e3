//! Masker synthesis and target/masker mixing at a requested SMR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, Window};
use crate::error::{Error, Result};

/// Maps presentation level to digital level: `ref_dbfs` RMS plays at `ref_spl_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCalibration {
    pub ref_dbfs: f64,
    pub ref_spl_db: f64,
}

impl Default for LevelCalibration {
    fn default() -> Self {
        Self {
            ref_dbfs: -25.0,
            ref_spl_db: 65.0,
        }
    }
}

impl LevelCalibration {
    pub fn rms_for_spl(&self, spl_db: f64) -> f64 {
        10f64.powf((self.ref_dbfs + spl_db - self.ref_spl_db) / 20.0)
    }
}

/// Long-term average power spectrum on a uniform frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Ltas {
    pub freqs_hz: Vec<f64>,
    pub power: Vec<f64>,
}

impl Ltas {
    /// Welch average of Hamming-windowed, 50%-overlapped `nfft`-point
    /// periodograms over every frame of every buffer. Buffers shorter than
    /// `nfft` contribute one zero-padded frame.
    pub fn welch(corpus: &[AudioBuffer], nfft: usize) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::Config("empty corpus".into()))?;
        let rate = first.sample_rate_hz();
        if corpus.iter().any(|b| b.sample_rate_hz() != rate) {
            return Err(Error::Config("corpus sample rates differ".into()));
        }
        if nfft < 16 {
            return Err(Error::Config("LTAS resolution too coarse".into()));
        }
        let hop = nfft / 2;
        let win = Window::Hamming.coefficients(nfft);
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        let n_bins = nfft / 2 + 1;
        let mut acc = vec![0.0; n_bins];
        let mut frames = 0usize;
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for b in corpus {
            let x = b.samples();
            let starts: Vec<usize> = if x.len() < nfft {
                if x.is_empty() {
                    vec![]
                } else {
                    vec![0]
                }
            } else {
                (0..=(x.len() - nfft) / hop).map(|f| f * hop).collect()
            };
            for s in starts {
                for i in 0..nfft {
                    let v = x.get(s + i).copied().unwrap_or(0.0);
                    buf[i] = Complex::new(v * win[i], 0.0);
                }
                fft.process(&mut buf);
                for k in 0..n_bins {
                    acc[k] += buf[k].norm_sqr();
                }
                frames += 1;
            }
        }
        if frames == 0 {
            return Err(Error::Config("corpus contains no samples".into()));
        }
        let df = rate as f64 / nfft as f64;
        Ok(Self {
            freqs_hz: (0..n_bins).map(|k| k as f64 * df).collect(),
            power: acc.into_iter().map(|p| p / frames as f64).collect(),
        })
    }

    /// Linear interpolation of the power at `f_hz`.
    pub fn power_at(&self, f_hz: f64) -> f64 {
        let df = self.freqs_hz[1] - self.freqs_hz[0];
        let pos = (f_hz / df).max(0.0);
        let i = pos.floor() as usize;
        if i + 1 >= self.power.len() {
            return self.power[self.power.len() - 1];
        }
        let t = pos - i as f64;
        self.power[i] * (1.0 - t) + self.power[i + 1] * t
    }

    /// Summed power (dB) in each 1/3-octave band whose center lies in
    /// `[f_lo, f_hi]`, centers at 1000 * 2^(k/3) Hz.
    pub fn third_octave_levels(&self, f_lo: f64, f_hi: f64) -> Vec<(f64, f64)> {
        let k_lo = (3.0 * (f_lo / 1000.0).log2()).ceil() as i32;
        let k_hi = (3.0 * (f_hi / 1000.0).log2()).floor() as i32;
        (k_lo..=k_hi)
            .map(|k| {
                let fc = 1000.0 * 2f64.powf(k as f64 / 3.0);
                let (lo, hi) = (fc * 2f64.powf(-1.0 / 6.0), fc * 2f64.powf(1.0 / 6.0));
                let p: f64 = self
                    .freqs_hz
                    .iter()
                    .zip(&self.power)
                    .filter(|(f, _)| **f >= lo && **f < hi)
                    .map(|(_, p)| p)
                    .sum();
                (fc, 10.0 * p.max(1e-30).log10())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsnOptions {
    /// Resolution of the LTAS estimate.
    pub nfft: usize,
    pub output_rms: f64,
    pub seed: u64,
}

impl Default for SsnOptions {
    fn default() -> Self {
        Self {
            nfft: 1024,
            output_rms: LevelCalibration::default().rms_for_spl(65.0),
            seed: 0,
        }
    }
}

/// Steady noise with the long-term spectrum of `corpus`: white Gaussian
/// noise shaped in one full-length FFT by the square root of the corpus LTAS.
pub fn make_ssn(corpus: &[AudioBuffer], duration_s: f64, opts: SsnOptions) -> Result<AudioBuffer> {
    let ltas = Ltas::welch(corpus, opts.nfft)?;
    let rate = corpus[0].sample_rate_hz();
    if !(duration_s > 0.0) {
        return Err(Error::Config("SSN duration must be positive".into()));
    }
    let n = (duration_s * rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(&mut rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = rate as f64 / n as f64;
    for k in 0..=n / 2 {
        let g = ltas.power_at(k as f64 * df).sqrt();
        buf[k] *= g;
        if k != 0 && k != n - k {
            buf[n - k] *= g;
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = crate::audio::rms(&out);
    if r == 0.0 {
        return Err(Error::Config("corpus has no energy to shape noise with".into()));
    }
    AudioBuffer::new(out.into_iter().map(|v| v * opts.output_rms / r).collect(), rate)
}

/// One 1/3-octave band of an LTAS comparison; levels are relative to each
/// spectrum's total power so overall gain does not count as mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtasBand {
    pub center_hz: f64,
    pub reference_db: f64,
    pub candidate_db: f64,
    pub diff_db: f64,
}

/// Band-by-band comparison of the LTAS of `candidate` against `reference`
/// over the 1/3-octave bands centered in `[f_lo, f_hi]`.
pub fn compare_ltas(
    reference: &[AudioBuffer],
    candidate: &[AudioBuffer],
    nfft: usize,
    f_lo: f64,
    f_hi: f64,
) -> Result<Vec<LtasBand>> {
    let r = Ltas::welch(reference, nfft)?;
    let c = Ltas::welch(candidate, nfft)?;
    if r.freqs_hz != c.freqs_hz {
        return Err(Error::Alignment("LTAS frequency grids differ".into()));
    }
    let total = |l: &Ltas| 10.0 * l.power.iter().sum::<f64>().max(1e-30).log10();
    let (rt, ct) = (total(&r), total(&c));
    Ok(r.third_octave_levels(f_lo, f_hi)
        .into_iter()
        .zip(c.third_octave_levels(f_lo, f_hi))
        .map(|((fc, rl), (_, cl))| LtasBand {
            center_hz: fc,
            reference_db: rl - rt,
            candidate_db: cl - ct,
            diff_db: (cl - ct) - (rl - rt),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub smr_db: f64,
    pub masker_lead_ms: f64,
    /// Loop maskers that are too short instead of failing.
    pub allow_loop: bool,
    pub crossfade_ms: f64,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            smr_db: 0.0,
            masker_lead_ms: 500.0,
            allow_loop: true,
            crossfade_ms: 10.0,
        }
    }
}

impl MixSpec {
    pub fn lead_samples(&self, rate: u32) -> usize {
        (self.masker_lead_ms * rate as f64 / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct MixResult {
    pub mixture: AudioBuffer,
    /// Target delayed by the lead, zero before it.
    pub target: AudioBuffer,
    /// Scaled masker over the full mixture length.
    pub masker: AudioBuffer,
    pub masker_gain: f64,
    pub lead_samples: usize,
}

impl MixResult {
    /// SMR measured over the overlap region.
    pub fn realized_smr_db(&self) -> f64 {
        let t = &self.target.samples()[self.lead_samples..];
        let m = &self.masker.samples()[self.lead_samples..];
        20.0 * (crate::audio::rms(t) / crate::audio::rms(m)).log10()
    }
}

/// Extends `masker` to `len` samples by looping with a linear crossfade.
pub fn loop_to_length(masker: &[f64], len: usize, crossfade: usize) -> Vec<f64> {
    if masker.len() >= len {
        return masker[..len].to_vec();
    }
    let xf = crossfade.min(masker.len() / 2);
    let mut out = masker.to_vec();
    while out.len() < len {
        let start = out.len() - xf;
        for i in 0..xf {
            let t = (i as f64 + 0.5) / xf as f64;
            out[start + i] = out[start + i] * (1.0 - t) + masker[i] * t;
        }
        out.extend_from_slice(&masker[xf..]);
    }
    out.truncate(len);
    out
}

/// Mixes so the masker starts `masker_lead_ms` before the target and ends
/// with it, scaled to the requested SMR over the overlap.
pub fn mix_at_smr(target: &AudioBuffer, masker: &AudioBuffer, spec: &MixSpec) -> Result<MixResult> {
    let rate = target.sample_rate_hz();
    if masker.sample_rate_hz() != rate {
        return Err(Error::Alignment(format!(
            "target at {rate} Hz, masker at {} Hz",
            masker.sample_rate_hz()
        )));
    }
    if !(spec.masker_lead_ms >= 0.0) || !spec.smr_db.is_finite() {
        return Err(Error::Config("lead must be >= 0 and SMR finite".into()));
    }
    let lead = spec.lead_samples(rate);
    let total = lead + target.len();
    if masker.len() < total && !spec.allow_loop {
        return Err(Error::Stimulus(format!(
            "masker has {} samples, need {total}",
            masker.len()
        )));
    }
    if masker.is_empty() {
        return Err(Error::Stimulus("empty masker".into()));
    }
    let xf = (spec.crossfade_ms * rate as f64 / 1000.0).round() as usize;
    let m = loop_to_length(masker.samples(), total, xf);
    let t_rms = target.rms();
    let m_rms = crate::audio::rms(&m[lead..]);
    if t_rms == 0.0 || m_rms == 0.0 {
        return Err(Error::Stimulus("target or masker is silent over the overlap".into()));
    }
    let gain = t_rms / (m_rms * 10f64.powf(spec.smr_db / 20.0));
    let m: Vec<f64> = m.into_iter().map(|v| v * gain).collect();
    let mut t = vec![0.0; total];
    t[lead..].copy_from_slice(target.samples());
    let mix: Vec<f64> = t.iter().zip(&m).map(|(a, b)| a + b).collect();
    Ok(MixResult {
        mixture: AudioBuffer::new(mix, rate)?,
        target: AudioBuffer::new(t, rate)?,
        masker: AudioBuffer::new(m, rate)?,
        masker_gain: gain,
        lead_samples: lead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    #[test]
    fn unit_rms_stems_at_zero_smr() {
        let t = synth::white_noise(8000, 16_000, 1.0, 1);
        let t = t.scaled(1.0 / t.rms()).unwrap();
        let m = synth::white_noise(20_000, 16_000, 1.0, 2);
        let m_overlap_rms = crate::audio::rms(&m.samples()[8000..16_000]);
        let m = m.scaled(1.0 / m_overlap_rms).unwrap();
        let r = mix_at_smr(&t, &m, &MixSpec::default()).unwrap();
        assert!((r.masker_gain - 1.0).abs() < 1e-12);
        assert_eq!(r.lead_samples, 8000);
        assert_eq!(r.mixture.len(), 16_000);
    }

    #[test]
    fn target_onset_and_additivity() {
        let t = synth::white_noise(4000, 16_000, 0.1, 3);
        let m = synth::white_noise(30_000, 16_000, 0.2, 4);
        let r = mix_at_smr(&t, &m, &MixSpec { smr_db: -3.0, ..Default::default() }).unwrap();
        assert!(r.target.samples()[..8000].iter().all(|&s| s == 0.0));
        assert_eq!(r.target.samples()[8000], t.samples()[0]);
        for i in 0..r.mixture.len() {
            assert_eq!(r.mixture.samples()[i], r.target.samples()[i] + r.masker.samples()[i]);
        }
        assert_eq!(r.mixture.len(), r.target.len());
        assert_eq!(r.mixture.len(), r.masker.len());
    }

    #[test]
    fn short_masker_loops_or_fails() {
        let t = synth::white_noise(4000, 16_000, 0.1, 5);
        let m = synth::white_noise(3000, 16_000, 0.1, 6);
        let r = mix_at_smr(&t, &m, &MixSpec::default()).unwrap();
        assert_eq!(r.mixture.len(), 12_000);
        let strict = MixSpec {
            allow_loop: false,
            ..Default::default()
        };
        assert!(matches!(mix_at_smr(&t, &m, &strict), Err(Error::Stimulus(_))));
    }

    #[test]
    fn loop_crossfade_is_continuous() {
        let m: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let out = loop_to_length(&m, 2500, 100);
        assert_eq!(out.len(), 2500);
        assert_eq!(&out[..900], &m[..900]);
        // after the splice the masker restarts from sample 100
        assert_eq!(out[1000], m[100]);
    }

    #[test]
    fn rate_mismatch() {
        let t = synth::white_noise(100, 16_000, 0.1, 1);
        let m = synth::white_noise(100_000, 8000, 0.1, 1);
        assert!(matches!(mix_at_smr(&t, &m, &MixSpec::default()), Err(Error::Alignment(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn realized_smr_matches(smr in -20.0f64..20.0, seed in 0u64..500, lead in 0.0f64..800.0) {
            let t = synth::white_noise(3000, 16_000, 0.05, seed);
            let m = synth::white_noise(7000, 16_000, 0.3, seed + 1000);
            let spec = MixSpec { smr_db: smr, masker_lead_ms: lead, ..Default::default() };
            let r = mix_at_smr(&t, &m, &spec).unwrap();
            prop_assert!((r.realized_smr_db() - smr).abs() < 0.01);
        }
    }

    #[test]
    fn ssn_from_white_is_flat() {
        let corpus = vec![synth::white_noise(16_000 * 3, 16_000, 0.1, 10)];
        let ssn = make_ssn(&corpus, 8.0, SsnOptions::default()).unwrap();
        assert!((ssn.rms() - SsnOptions::default().output_rms).abs() < 1e-12);
        let levels = Ltas::welch(&[ssn], 1024).unwrap().third_octave_levels(200.0, 6000.0);
        // flat spectrum: band power grows with bandwidth, so compare per-Hz density
        let dens: Vec<f64> = levels
            .iter()
            .map(|(fc, l)| l - 10.0 * (fc * (2f64.powf(1.0 / 6.0) - 2f64.powf(-1.0 / 6.0))).log10())
            .collect();
        let mean = dens.iter().sum::<f64>() / dens.len() as f64;
        for d in &dens {
            assert!((d - mean).abs() < 2.0, "{dens:?}");
        }
    }

    #[test]
    fn ssn_from_tone_concentrates_at_tone() {
        let corpus = vec![synth::tone(1000.0, 32_000, 16_000, 0.5)];
        let ssn = make_ssn(&corpus, 4.0, SsnOptions::default()).unwrap();
        let levels = Ltas::welch(&[ssn], 1024).unwrap().third_octave_levels(200.0, 6000.0);
        let best = levels.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((best.0 - 1000.0).abs() < 1.0);
    }

    #[test]
    fn ltas_comparison_ignores_gain() {
        let a = synth::white_noise(16_000, 16_000, 0.1, 3);
        let b = a.scaled(7.0).unwrap();
        for band in compare_ltas(&[a], &[b], 512, 200.0, 6000.0).unwrap() {
            assert!(band.diff_db.abs() < 1e-9);
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(make_ssn(&[], 1.0, SsnOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn calibration_reference() {
        let c = LevelCalibration::default();
        assert!((20.0 * c.rms_for_spl(65.0).log10() + 25.0).abs() < 1e-12);
        assert!((20.0 * c.rms_for_spl(75.0).log10() + 15.0).abs() < 1e-12);
    }
}
