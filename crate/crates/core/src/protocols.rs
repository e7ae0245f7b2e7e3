//! Listening-test procedures: the adaptive SRT staircase with a simulated
//! listener, keyword scoring, and trial scheduling and scoring for the
//! clarity-preference and MUSHRA tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEYWORDS_PER_SENTENCE: u32 = 10;

/// Gap between intervals of a multi-interval trial.
pub const INTER_STIMULUS_MS: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaircaseConfig {
    pub start_smr_db: f64,
    pub sentences: usize,
    pub keywords: u32,
    pub initial_step_db: f64,
    pub final_step_db: f64,
    /// Sentences presented at the initial step.
    pub initial_sentences: usize,
    /// Turn points averaged for the SRT.
    pub srt_reversals: usize,
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self {
            start_smr_db: 4.0,
            sentences: 20,
            keywords: KEYWORDS_PER_SENTENCE,
            initial_step_db: 4.0,
            final_step_db: 2.0,
            initial_sentences: 4,
            srt_reversals: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Down,
    Up,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseState {
    pub config: StaircaseConfig,
    pub current_smr_db: f64,
    pub sentences_presented: usize,
    pub step_db: f64,
    /// SMRs at which the direction changed, before the move.
    pub reversal_smrs: Vec<f64>,
    pub direction: Direction,
    pub finished: bool,
    /// SMR of every sentence presented so far.
    pub presented_smrs: Vec<f64>,
}

impl StaircaseState {
    pub fn new(config: StaircaseConfig) -> Result<Self> {
        if config.sentences == 0 || config.keywords == 0 || config.srt_reversals == 0 {
            return Err(Error::Config("staircase needs sentences, keywords and reversals".into()));
        }
        if !(config.initial_step_db > 0.0 && config.final_step_db > 0.0) || !config.start_smr_db.is_finite() {
            return Err(Error::Config("staircase steps must be positive and start finite".into()));
        }
        Ok(Self {
            config,
            current_smr_db: config.start_smr_db,
            sentences_presented: 0,
            step_db: Self::step_for(&config, 0),
            reversal_smrs: Vec::new(),
            direction: Direction::None,
            finished: false,
            presented_smrs: Vec::new(),
        })
    }

    fn step_for(config: &StaircaseConfig, presented: usize) -> f64 {
        if presented < config.initial_sentences {
            config.initial_step_db
        } else {
            config.final_step_db
        }
    }

    /// More than half the keywords repeated correctly.
    pub fn is_majority(&self, correct: u32) -> bool {
        2 * correct > self.config.keywords
    }

    /// Moves down after a correct majority and up otherwise. The list is
    /// finished once every sentence has been presented.
    pub fn step(&mut self, majority_correct: bool) -> Result<()> {
        if self.finished {
            return Err(Error::State("staircase already finished".into()));
        }
        let dir = if majority_correct {
            Direction::Down
        } else {
            Direction::Up
        };
        if self.direction != Direction::None && dir != self.direction {
            self.reversal_smrs.push(self.current_smr_db);
        }
        self.presented_smrs.push(self.current_smr_db);
        self.current_smr_db += match dir {
            Direction::Down => -self.step_db,
            _ => self.step_db,
        };
        self.direction = dir;
        self.sentences_presented += 1;
        self.step_db = Self::step_for(&self.config, self.sentences_presented);
        self.finished = self.sentences_presented >= self.config.sentences;
        Ok(())
    }

    /// Mean of the last `srt_reversals` turn points.
    pub fn srt_estimate(&self) -> Result<f64> {
        let k = self.config.srt_reversals;
        if self.reversal_smrs.len() < k {
            return Err(Error::InsufficientData(format!(
                "{} turn point(s), need {k}",
                self.reversal_smrs.len()
            )));
        }
        let last = &self.reversal_smrs[self.reversal_smrs.len() - k..];
        Ok(last.iter().sum::<f64>() / k as f64)
    }
}

/// Listener whose keywords are independently correct with a logistic
/// probability of the SMR.
#[derive(Debug, Clone)]
pub struct SimListener {
    pub srt_true_db: f64,
    pub slope_per_db: f64,
    rng: ChaCha8Rng,
}

impl SimListener {
    pub fn new(srt_true_db: f64, slope_per_db: f64, seed: u64) -> Result<Self> {
        if !(slope_per_db > 0.0) || !srt_true_db.is_finite() {
            return Err(Error::Config("listener slope must be positive and SRT finite".into()));
        }
        Ok(Self {
            srt_true_db,
            slope_per_db,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn keyword_probability(&self, smr_db: f64) -> f64 {
        1.0 / (1.0 + (-self.slope_per_db * (smr_db - self.srt_true_db)).exp())
    }

    pub fn respond(&mut self, smr_db: f64, n_keywords: u32) -> u32 {
        let p = self.keyword_probability(smr_db);
        (0..n_keywords).filter(|_| self.rng.random::<f64>() < p).count() as u32
    }
}

/// Runs a full staircase against a simulated listener.
pub fn run_staircase(listener: &mut SimListener, config: StaircaseConfig) -> Result<StaircaseState> {
    let mut st = StaircaseState::new(config)?;
    while !st.finished {
        let correct = listener.respond(st.current_smr_db, config.keywords);
        let majority = st.is_majority(correct);
        st.step(majority)?;
    }
    Ok(st)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrtSimReport {
    /// `None` where a run collected too few turn points.
    pub estimates: Vec<Option<f64>>,
    pub mean_bias_db: f64,
    pub sd_db: f64,
    pub failed_runs: usize,
}

impl SrtSimReport {
    pub fn to_csv(&self, srt_true_db: f64) -> String {
        let mut out = String::from("run,srt_estimate_db,bias_db\n");
        for (i, e) in self.estimates.iter().enumerate() {
            match e {
                Some(v) => {
                    let _ = writeln!(out, "{i},{v:.6},{:.6}", v - srt_true_db);
                }
                None => {
                    let _ = writeln!(out, "{i},,");
                }
            }
        }
        out
    }
}

/// `runs` independent staircases; run `i` uses listener seed `seed + i`.
pub fn simulate_srt(
    srt_true_db: f64,
    slope_per_db: f64,
    runs: usize,
    seed: u64,
    config: StaircaseConfig,
) -> Result<SrtSimReport> {
    let mut estimates = Vec::with_capacity(runs);
    for i in 0..runs {
        let mut l = SimListener::new(srt_true_db, slope_per_db, seed.wrapping_add(i as u64))?;
        let st = run_staircase(&mut l, config)?;
        estimates.push(st.srt_estimate().ok());
    }
    let ok: Vec<f64> = estimates.iter().flatten().map(|e| e - srt_true_db).collect();
    if ok.is_empty() {
        return Err(Error::InsufficientData("no run produced an SRT".into()));
    }
    let mean = ok.iter().sum::<f64>() / ok.len() as f64;
    let sd = if ok.len() > 1 {
        (ok.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SrtSimReport {
        failed_runs: runs - ok.len(),
        estimates,
        mean_bias_db: mean,
        sd_db: sd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSmrs {
    pub smr_h: f64,
    pub smr_l: f64,
}

/// 1 dB above and 2 dB below the SRT.
pub fn derive_test_smrs(srt_db: f64) -> Result<TestSmrs> {
    if !srt_db.is_finite() {
        return Err(Error::Validation("SRT must be finite".into()));
    }
    Ok(TestSmrs {
        smr_h: srt_db + 1.0,
        smr_l: srt_db - 2.0,
    })
}

/// Percent of keywords correct over all sentences.
pub fn score_si(counts: &[u32]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Validation("no sentences scored".into()));
    }
    if let Some(c) = counts.iter().find(|&&c| c > KEYWORDS_PER_SENTENCE) {
        return Err(Error::Validation(format!(
            "{c} correct exceeds {KEYWORDS_PER_SENTENCE} keywords"
        )));
    }
    let total: u32 = counts.iter().sum();
    Ok(100.0 * total as f64 / (KEYWORDS_PER_SENTENCE as f64 * counts.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    LatinSquare,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    /// Condition labels, e.g. "ssn/smr_h".
    pub conditions: Vec<String>,
    /// Sentence ids available to each condition, same order as `conditions`.
    pub sentences: Vec<Vec<String>>,
    pub sentences_per_condition: usize,
    /// Processing labels assigned to the intervals of every trial.
    pub intervals: Vec<String>,
    pub ordering: Ordering,
    /// Row of the Latin square (subject number).
    pub subject: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTrial {
    pub index: usize,
    pub condition: String,
    pub sentence: String,
    /// Processing label per interval in presentation order.
    pub intervals: Vec<String>,
    pub isi_ms: f64,
}

/// Cyclic Latin square: row `r` puts condition `(j + r) mod n` at position `j`.
pub fn latin_square_row(n: usize, row: usize) -> Vec<usize> {
    (0..n).map(|j| (j + row) % n).collect()
}

/// Condition blocks in plan order, then a seeded permutation of the
/// interval labels for every trial.
pub fn schedule_trials(plan: &TrialPlan, seed: u64) -> Result<Vec<ScheduledTrial>> {
    let n = plan.conditions.len();
    if n == 0 || plan.intervals.is_empty() {
        return Err(Error::Config("plan needs conditions and interval labels".into()));
    }
    if plan.sentences.len() != n {
        return Err(Error::Config(format!(
            "{} sentence lists for {n} conditions",
            plan.sentences.len()
        )));
    }
    if let Some((i, _)) = plan
        .sentences
        .iter()
        .enumerate()
        .find(|(_, s)| s.len() < plan.sentences_per_condition)
    {
        return Err(Error::Config(format!(
            "condition {} has {} sentences, plan needs {}",
            plan.conditions[i],
            plan.sentences[i].len(),
            plan.sentences_per_condition
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = match plan.ordering {
        Ordering::LatinSquare => latin_square_row(n, plan.subject),
        Ordering::Random => {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        }
    };
    let mut trials = Vec::with_capacity(n * plan.sentences_per_condition);
    for c in order {
        for sentence in &plan.sentences[c][..plan.sentences_per_condition] {
            let mut intervals = plan.intervals.clone();
            intervals.shuffle(&mut rng);
            trials.push(ScheduledTrial {
                index: trials.len(),
                condition: plan.conditions[c].clone(),
                sentence: sentence.clone(),
                intervals,
                isi_ms: INTER_STIMULUS_MS,
            });
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceResponse {
    pub condition: String,
    /// Processing label of the chosen interval.
    pub choice: String,
}

/// Per condition, the percentage of trials on which each label was chosen.
/// Every label in `labels` is reported, so the percentages sum to 100.
pub fn score_preference(
    responses: &[PreferenceResponse],
    labels: &[String],
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in responses {
        if !labels.contains(&r.choice) {
            return Err(Error::Validation(format!("unknown choice {:?}", r.choice)));
        }
        let c = counts
            .entry(r.condition.clone())
            .or_insert_with(|| labels.iter().map(|l| (l.clone(), 0)).collect());
        *c.get_mut(&r.choice).expect("label prefilled") += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(cond, c)| {
            let total: usize = c.values().sum();
            let pct = c
                .into_iter()
                .map(|(l, k)| (l, 100.0 * k as f64 / total as f64))
                .collect();
            (cond, pct)
        })
        .collect())
}

pub fn preference_csv(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> String {
    let mut out = String::from("condition,processing,percent\n");
    for (cond, m) in scores {
        for (label, pct) in m {
            let _ = writeln!(out, "{cond},{label},{pct:.4}");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushraRating {
    pub trial: usize,
    pub condition: String,
    pub label: String,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushraScore {
    pub condition: String,
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean; 0 when `n == 1`.
    pub se: f64,
    pub single_rating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MushraSummary {
    pub scores: Vec<MushraScore>,
    pub reference: Vec<MushraScore>,
    pub anchor: Vec<MushraScore>,
    pub reference_trials: usize,
    pub reference_below_90: usize,
    /// Hidden reference rated below 90 in more than 15% of trials.
    pub listener_flagged: bool,
}

pub const MUSHRA_REFERENCE_FLOOR: f64 = 90.0;
pub const MUSHRA_REFERENCE_MAX_MISS: f64 = 0.15;

/// Means and standard errors per (condition, label). Ratings of
/// `reference_label` and `anchor_label` are reported separately and drive
/// the listener screening.
pub fn score_mushra(
    ratings: &[MushraRating],
    reference_label: &str,
    anchor_label: &str,
) -> Result<MushraSummary> {
    if let Some(r) = ratings.iter().find(|r| !(0.0..=100.0).contains(&r.rating)) {
        return Err(Error::Validation(format!("rating {} outside [0, 100]", r.rating)));
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in ratings {
        groups
            .entry((r.condition.clone(), r.label.clone()))
            .or_default()
            .push(r.rating);
    }
    let mut summary = MushraSummary {
        scores: vec![],
        reference: vec![],
        anchor: vec![],
        reference_trials: 0,
        reference_below_90: 0,
        listener_flagged: false,
    };
    for ((condition, label), v) in groups {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let s = MushraScore {
            condition,
            label: label.clone(),
            n,
            mean,
            se,
            single_rating: n == 1,
        };
        if label == reference_label {
            summary.reference.push(s);
        } else if label == anchor_label {
            summary.anchor.push(s);
        } else {
            summary.scores.push(s);
        }
    }
    let refs: Vec<f64> = ratings
        .iter()
        .filter(|r| r.label == reference_label)
        .map(|r| r.rating)
        .collect();
    summary.reference_trials = refs.len();
    summary.reference_below_90 = refs.iter().filter(|&&r| r < MUSHRA_REFERENCE_FLOOR).count();
    summary.listener_flagged = !refs.is_empty()
        && summary.reference_below_90 as f64 > MUSHRA_REFERENCE_MAX_MISS * refs.len() as f64;
    Ok(summary)
}

pub fn mushra_csv(summary: &MushraSummary) -> String {
    let mut out = String::from("condition,label,n,mean,se\n");
    for s in summary.scores.iter().chain(&summary.reference).chain(&summary.anchor) {
        let _ = writeln!(out, "{},{},{},{:.4},{:.4}", s.condition, s.label, s.n, s.mean, s.se);
    }
    out
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogRecord {
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub trial_id: String,
    pub condition: String,
    pub stimuli: Vec<String>,
    pub response: serde_json::Value,
}

pub fn append_jsonl(out: &mut impl std::io::Write, record: &TrialLogRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<TrialLogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
