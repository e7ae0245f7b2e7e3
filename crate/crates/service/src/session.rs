//! Session state machines for the three test kinds.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sce_core::audio::AudioBuffer;
use sce_core::enhance::SceParams;
use sce_core::error::Error;
use sce_core::ga::{GaConfig, GaRun, Genome, JudgmentRound, ParamGrid};
use sce_core::mixing::{mix_at_smr, MixSpec};
use sce_core::pipeline::{process, ProcessOptions, Processing, Stimulus};
use sce_core::protocols::{
    score_mushra, score_preference, schedule_trials, MushraRating, Ordering, PreferenceResponse,
    ScheduledTrial, TrialLogRecord, TrialPlan, INTER_STIMULUS_MS,
};
use sce_core::snr::GateConfig;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::stimuli::{lowpass_anchor, MixedSource, Source, StimulusInfo, StimulusStore};
use crate::ApiError;

pub const REFERENCE_LABEL: &str = "reference";
pub const ANCHOR_LABEL: &str = "anchor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionKind {
    GaFit,
    Clarity,
    Mushra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    AwaitingResponse,
    Processing,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseSchema {
    #[serde(rename = "pick_one_of_2")]
    PickOneOf2,
    #[serde(rename = "pick_one_of_3")]
    PickOneOf3,
    #[serde(rename = "ratings_0_100")]
    Ratings0To100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusRef {
    pub token: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    /// Known only for scheduled tests.
    pub total: Option<usize>,
    /// GA generation being judged.
    pub generation: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPayload {
    pub trial_id: String,
    pub session_id: String,
    pub kind: SessionKind,
    pub schema: ResponseSchema,
    pub stimuli: Vec<StimulusRef>,
    pub prompt: String,
    /// Silence the client leaves between intervals.
    pub isi_ms: f64,
    pub progress: Progress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridChoice {
    #[default]
    ExperimentOne,
    ExperimentTwo,
}

impl GridChoice {
    pub fn grid(self) -> ParamGrid {
        match self {
            GridChoice::ExperimentOne => ParamGrid::experiment_one(),
            GridChoice::ExperimentTwo => ParamGrid::experiment_two(),
        }
    }
}

fn default_ga_processing() -> Processing {
    Processing::SceIsnr
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaFitConfig {
    pub stimulus: MixedSource,
    #[serde(default = "default_ga_processing")]
    pub processing: Processing,
    #[serde(default)]
    pub grid: GridChoice,
    #[serde(default)]
    pub ga: GaConfig,
    #[serde(default)]
    pub gate: GateConfig,
    /// Seeds pair order within each generation.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub label: String,
    pub masker: Source,
    pub smr_db: f64,
}

fn default_ordering() -> Ordering {
    Ordering::LatinSquare
}

fn default_anchor_cutoff() -> f64 {
    3500.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListeningConfig {
    pub conditions: Vec<ConditionSpec>,
    /// Pool of target sentences; condition `c` uses the `c`-th block of
    /// `sentences_per_condition` entries.
    pub sentences: Vec<Source>,
    pub sentences_per_condition: usize,
    /// Processing types compared on every trial.
    #[serde(default)]
    pub processing: Option<Vec<Processing>>,
    pub params: SceParams,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default)]
    pub subject: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_anchor_cutoff")]
    pub anchor_cutoff_hz: f64,
}

/// Shared context for rendering.
pub struct Ctx<'a> {
    pub stimulus_dir: &'a std::path::Path,
    pub sample_rate_hz: u32,
    pub store: &'a StimulusStore,
}

fn render_err(e: Error) -> ApiError {
    ApiError::internal(format!("rendering failed: {e}"))
}

fn config_err(e: Error) -> ApiError {
    ApiError::unprocessable(e.to_string())
}

struct GaEngine {
    run: GaRun,
    round: Option<JudgmentRound>,
    rng: ChaCha8Rng,
    stimulus: Stimulus,
    opts: ProcessOptions,
    tokens: HashMap<Genome, String>,
    timed_out: bool,
}

impl GaEngine {
    fn new(cfg: GaFitConfig, ctx: &Ctx) -> Result<Self, ApiError> {
        let stimulus = cfg
            .stimulus
            .render(ctx.stimulus_dir, ctx.sample_rate_hz)
            .map_err(config_err)?;
        let run = GaRun::new(cfg.ga, cfg.grid.grid()).map_err(config_err)?;
        Ok(Self {
            run,
            round: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stimulus,
            opts: ProcessOptions {
                processing: cfg.processing,
                gate: cfg.gate,
                ..Default::default()
            },
            tokens: HashMap::new(),
            timed_out: false,
        })
    }

    fn token_for(&mut self, g: Genome, session_id: &str, ctx: &Ctx) -> Result<String, ApiError> {
        if let Some(t) = self.tokens.get(&g) {
            return Ok(t.clone());
        }
        let params = self.run.grid().params(&g).map_err(render_err)?;
        let out = process(&self.stimulus, params, &self.opts).map_err(render_err)?;
        let token = ctx
            .store
            .insert(
                &out.audio,
                StimulusInfo {
                    session_id: session_id.to_string(),
                    label: format!("genome b{} xi{} m{} s{}", g.b, g.xi, g.m, g.s),
                    processing: Some(self.opts.processing),
                    genome: Some(g),
                    params: Some(params),
                    condition: None,
                    sentence: None,
                },
            )
            .map_err(render_err)?;
        self.tokens.insert(g, token.clone());
        Ok(token)
    }

    /// Next pair to judge, starting a new round when needed.
    fn pending_pair(&mut self) -> Result<Option<usize>, ApiError> {
        loop {
            if self.run.is_finished() {
                return Ok(None);
            }
            if self.round.is_none() {
                self.round = Some(JudgmentRound::new(self.run.population(), &mut self.rng));
            }
            let round = self.round.as_ref().expect("set above");
            if let Some(i) = round.next_pending() {
                return Ok(Some(i));
            }
            let scores = round.scores().map_err(render_err)?;
            self.round = None;
            self.run.submit_scores(scores).map_err(render_err)?;
        }
    }

    fn results(&self) -> Value {
        let best = self.run.best().map(|(g, score)| {
            json!({
                "genome": g,
                "params": self.run.grid().params(&g).ok(),
                "score": score,
            })
        });
        json!({
            "finished": self.run.is_finished(),
            "timed_out": self.timed_out,
            "generations": self.run.history().generations.len(),
            "best": best,
            "history": self.run.history(),
        })
    }
}

struct ListeningEngine {
    kind: SessionKind,
    trials: Vec<ScheduledTrial>,
    next: usize,
    conditions: Vec<ConditionSpec>,
    maskers: HashMap<String, AudioBuffer>,
    sentences: HashMap<String, AudioBuffer>,
    labels: Vec<(String, Option<Processing>)>,
    params: SceParams,
    gate: GateConfig,
    anchor_cutoff_hz: f64,
    preferences: Vec<PreferenceResponse>,
    ratings: Vec<MushraRating>,
}

impl ListeningEngine {
    fn new(kind: SessionKind, cfg: ListeningConfig, ctx: &Ctx) -> Result<Self, ApiError> {
        let processing = cfg.processing.clone().unwrap_or_else(|| {
            vec![Processing::Unprocessed, Processing::Sce, Processing::SceIsnr]
        });
        if kind == SessionKind::Clarity && processing.len() != 3 {
            return Err(ApiError::unprocessable(
                "a clarity trial compares exactly three processing types",
            ));
        }
        if processing.is_empty() {
            return Err(ApiError::unprocessable("no processing types to rate"));
        }
        let mut seen = processing.clone();
        seen.sort_by_key(|p| p.label());
        seen.dedup();
        if seen.len() != processing.len() {
            return Err(ApiError::unprocessable("processing types must be distinct"));
        }
        cfg.params.validate().map_err(config_err)?;
        let n = cfg.conditions.len();
        let k = cfg.sentences_per_condition;
        if n == 0 || k == 0 {
            return Err(ApiError::unprocessable("need conditions and sentences per condition"));
        }
        if cfg.sentences.len() < n * k {
            return Err(ApiError::unprocessable(format!(
                "{} sentences cannot fill {n} conditions x {k}",
                cfg.sentences.len()
            )));
        }
        let mut labels: Vec<(String, Option<Processing>)> =
            processing.iter().map(|p| (p.label().to_string(), Some(*p))).collect();
        if kind == SessionKind::Mushra {
            labels.push((REFERENCE_LABEL.into(), None));
            labels.push((ANCHOR_LABEL.into(), None));
        }
        let plan = TrialPlan {
            conditions: cfg.conditions.iter().map(|c| c.label.clone()).collect(),
            sentences: (0..n)
                .map(|c| (c * k..(c + 1) * k).map(|i| format!("sentence{i}")).collect())
                .collect(),
            sentences_per_condition: k,
            intervals: labels.iter().map(|l| l.0.clone()).collect(),
            ordering: cfg.ordering,
            subject: cfg.subject,
        };
        let trials = schedule_trials(&plan, cfg.seed).map_err(config_err)?;
        let mut maskers = HashMap::new();
        for c in &cfg.conditions {
            if maskers.contains_key(&c.label) {
                return Err(ApiError::unprocessable(format!("duplicate condition {}", c.label)));
            }
            let m = c.masker.load(ctx.stimulus_dir, ctx.sample_rate_hz).map_err(config_err)?;
            maskers.insert(c.label.clone(), m);
        }
        let mut sentences = HashMap::new();
        for (i, s) in cfg.sentences.iter().take(n * k).enumerate() {
            let buf = s.load(ctx.stimulus_dir, ctx.sample_rate_hz).map_err(config_err)?;
            sentences.insert(format!("sentence{i}"), buf);
        }
        Ok(Self {
            kind,
            trials,
            next: 0,
            conditions: cfg.conditions,
            maskers,
            sentences,
            labels,
            params: cfg.params,
            gate: cfg.gate,
            anchor_cutoff_hz: cfg.anchor_cutoff_hz,
            preferences: vec![],
            ratings: vec![],
        })
    }

    fn render_trial(&self, t: &ScheduledTrial, session_id: &str, ctx: &Ctx) -> Result<Vec<String>, ApiError> {
        let cond = self
            .conditions
            .iter()
            .find(|c| c.label == t.condition)
            .expect("scheduled from these conditions");
        let mix = mix_at_smr(
            &self.sentences[&t.sentence],
            &self.maskers[&t.condition],
            &MixSpec {
                smr_db: cond.smr_db,
                ..Default::default()
            },
        )
        .map_err(render_err)?;
        let stim: Stimulus = mix.into();
        let mut tokens = Vec::with_capacity(t.intervals.len());
        for label in &t.intervals {
            let processing = self
                .labels
                .iter()
                .find(|l| &l.0 == label)
                .and_then(|l| l.1);
            let audio = match (processing, label.as_str()) {
                (Some(p), _) => {
                    let opts = ProcessOptions {
                        processing: p,
                        gate: self.gate,
                        ..Default::default()
                    };
                    process(&stim, self.params, &opts).map_err(render_err)?.audio
                }
                (None, REFERENCE_LABEL) => stim.target.clone().expect("mixed stimulus has stems"),
                (None, _) => lowpass_anchor(stim.target.as_ref().expect("stems"), self.anchor_cutoff_hz)
                    .map_err(render_err)?,
            };
            tokens.push(
                ctx.store
                    .insert(
                        &audio,
                        StimulusInfo {
                            session_id: session_id.to_string(),
                            label: label.clone(),
                            processing,
                            genome: None,
                            params: processing.map(|_| self.params),
                            condition: Some(t.condition.clone()),
                            sentence: Some(t.sentence.clone()),
                        },
                    )
                    .map_err(render_err)?,
            );
        }
        Ok(tokens)
    }

    fn results(&self) -> Result<Value, ApiError> {
        let finished = self.next >= self.trials.len();
        let body = match self.kind {
            SessionKind::Clarity => {
                let labels: Vec<String> = self.labels.iter().map(|l| l.0.clone()).collect();
                let pct = score_preference(&self.preferences, &labels).map_err(render_err)?;
                json!({ "finished": finished, "percentages": pct, "trials": self.trials.len() })
            }
            _ => {
                let summary =
                    score_mushra(&self.ratings, REFERENCE_LABEL, ANCHOR_LABEL).map_err(render_err)?;
                json!({ "finished": finished, "mushra": summary, "trials": self.trials.len() })
            }
        };
        Ok(body)
    }
}

enum Engine {
    Ga(Box<GaEngine>),
    Listening(Box<ListeningEngine>),
}

enum TrialCtx {
    GaPair(usize),
    Listening(usize),
}

struct Outstanding {
    payload: TrialPayload,
    ctx: TrialCtx,
}

#[derive(Clone)]
struct Answered {
    answer: Value,
    ack: Value,
}

pub struct Session {
    pub id: String,
    pub kind: SessionKind,
    state: SessionState,
    last_active: Instant,
    timed_out: bool,
    engine: Engine,
    outstanding: Option<Outstanding>,
    answered: HashMap<String, Answered>,
    log: Vec<TrialLogRecord>,
    issued: usize,
    log_path: Option<PathBuf>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Session {
    pub fn create(
        id: String,
        kind: SessionKind,
        config: Value,
        ctx: &Ctx,
        log_path: Option<PathBuf>,
    ) -> Result<Self, ApiError> {
        let bad = |e: serde_json::Error| ApiError::unprocessable(format!("invalid config: {e}"));
        let engine = match kind {
            SessionKind::GaFit => {
                Engine::Ga(Box::new(GaEngine::new(serde_json::from_value(config).map_err(bad)?, ctx)?))
            }
            SessionKind::Clarity | SessionKind::Mushra => Engine::Listening(Box::new(
                ListeningEngine::new(kind, serde_json::from_value(config).map_err(bad)?, ctx)?,
            )),
        };
        Ok(Self {
            id,
            kind,
            state: SessionState::Created,
            last_active: Instant::now(),
            timed_out: false,
            engine,
            outstanding: None,
            answered: HashMap::new(),
            log: Vec::new(),
            issued: 0,
            log_path,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn log(&self) -> &[TrialLogRecord] {
        &self.log
    }

    pub fn is_timed_out(&self) -> bool {
        self.timed_out
    }

    /// Marks the session abandoned when idle longer than `ttl`.
    pub fn check_expiry(&mut self, ttl: Duration) {
        if self.state != SessionState::Finished && self.last_active.elapsed() > ttl {
            self.timed_out = true;
            if let Engine::Ga(g) = &mut self.engine {
                g.timed_out = true;
            }
        }
    }

    fn ensure_live(&self) -> Result<(), ApiError> {
        if self.timed_out {
            return Err(ApiError::gone("session timeout"));
        }
        Ok(())
    }

    fn prompt(&self) -> &'static str {
        match self.kind {
            SessionKind::GaFit => "Which of the two sentences was easier to understand?",
            SessionKind::Clarity => "Which interval sounded clearest?",
            SessionKind::Mushra => "Rate each version from 0 (bad) to 100 (excellent).",
        }
    }

    /// The outstanding trial, issuing a new one if none is pending.
    /// `None` once the session is finished.
    pub fn current_trial(&mut self, ctx: &Ctx) -> Result<Option<TrialPayload>, ApiError> {
        self.ensure_live()?;
        self.last_active = Instant::now();
        if let Some(o) = &self.outstanding {
            return Ok(Some(o.payload.clone()));
        }
        if self.state == SessionState::Finished {
            return Ok(None);
        }
        let trial_id = format!("{}-t{}", self.id, self.issued);
        let answered = self.answered.len();
        let (schema, tokens, progress, tctx) = match &mut self.engine {
            Engine::Ga(g) => {
                let Some(i) = g.pending_pair()? else {
                    self.state = SessionState::Finished;
                    return Ok(None);
                };
                let pair = g.round.as_ref().expect("pending pair").pairs()[i];
                let a = g.token_for(pair.first, &self.id, ctx)?;
                let b = g.token_for(pair.second, &self.id, ctx)?;
                let progress = Progress {
                    answered,
                    total: None,
                    generation: Some(g.run.generation()),
                };
                (ResponseSchema::PickOneOf2, vec![a, b], progress, TrialCtx::GaPair(i))
            }
            Engine::Listening(l) => {
                if l.next >= l.trials.len() {
                    self.state = SessionState::Finished;
                    return Ok(None);
                }
                let t = l.trials[l.next].clone();
                let tokens = l.render_trial(&t, &self.id, ctx)?;
                let schema = if self.kind == SessionKind::Clarity {
                    ResponseSchema::PickOneOf3
                } else {
                    ResponseSchema::Ratings0To100
                };
                let progress = Progress {
                    answered,
                    total: Some(l.trials.len()),
                    generation: None,
                };
                (schema, tokens, progress, TrialCtx::Listening(l.next))
            }
        };
        let payload = TrialPayload {
            trial_id,
            session_id: self.id.clone(),
            kind: self.kind,
            schema,
            stimuli: tokens
                .into_iter()
                .map(|t| StimulusRef {
                    url: format!("/stimuli/{t}"),
                    token: t,
                })
                .collect(),
            prompt: self.prompt().to_string(),
            isi_ms: INTER_STIMULUS_MS,
            progress,
        };
        self.issued += 1;
        self.state = SessionState::AwaitingResponse;
        self.outstanding = Some(Outstanding {
            payload: payload.clone(),
            ctx: tctx,
        });
        Ok(Some(payload))
    }

    /// Records the answer to the outstanding trial. Resubmitting an
    /// already-accepted answer returns the original acknowledgement.
    pub fn respond(&mut self, trial_id: &str, answer: Value, ctx: &Ctx) -> Result<Value, ApiError> {
        if let Some(prev) = self.answered.get(trial_id) {
            return if prev.answer == answer {
                Ok(prev.ack.clone())
            } else {
                Err(ApiError::conflict(format!("trial {trial_id} was already answered differently")))
            };
        }
        self.ensure_live()?;
        let Some(out) = &self.outstanding else {
            return Err(ApiError::conflict(format!("no outstanding trial matches {trial_id}")));
        };
        if out.payload.trial_id != trial_id {
            return Err(ApiError::conflict(format!(
                "trial {trial_id} is stale; outstanding is {}",
                out.payload.trial_id
            )));
        }
        let n = out.payload.stimuli.len();
        let condition;
        match out.payload.schema {
            ResponseSchema::PickOneOf2 | ResponseSchema::PickOneOf3 => {
                let choice = answer
                    .get("choice")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| ApiError::unprocessable("answer needs an integer \"choice\""))?
                    as usize;
                if choice >= n {
                    return Err(ApiError::unprocessable(format!("choice must be below {n}")));
                }
                match (&out.ctx, &mut self.engine) {
                    (TrialCtx::GaPair(i), Engine::Ga(g)) => {
                        let generation = g.run.generation();
                        g.round
                            .as_mut()
                            .expect("round of outstanding pair")
                            .record(*i, choice == 0)
                            .map_err(render_err)?;
                        condition = format!("generation{generation}");
                    }
                    (TrialCtx::Listening(i), Engine::Listening(l)) => {
                        let t = &l.trials[*i];
                        l.preferences.push(PreferenceResponse {
                            condition: t.condition.clone(),
                            choice: t.intervals[choice].clone(),
                        });
                        condition = t.condition.clone();
                        l.next += 1;
                    }
                    _ => unreachable!("trial context matches engine"),
                }
            }
            ResponseSchema::Ratings0To100 => {
                let ratings: Vec<f64> = answer
                    .get("ratings")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ApiError::unprocessable("answer needs a \"ratings\" array"))?
                    .iter()
                    .map(|v| v.as_f64().filter(|r| (0.0..=100.0).contains(r)))
                    .collect::<Option<_>>()
                    .ok_or_else(|| ApiError::unprocessable("ratings must be numbers in [0, 100]"))?;
                if ratings.len() != n {
                    return Err(ApiError::unprocessable(format!("expected {n} ratings")));
                }
                let (TrialCtx::Listening(i), Engine::Listening(l)) = (&out.ctx, &mut self.engine) else {
                    unreachable!("ratings only for listening sessions")
                };
                let t = &l.trials[*i];
                for (label, r) in t.intervals.iter().zip(&ratings) {
                    l.ratings.push(MushraRating {
                        trial: *i,
                        condition: t.condition.clone(),
                        label: label.clone(),
                        rating: *r,
                    });
                }
                condition = t.condition.clone();
                l.next += 1;
            }
        }
        self.state = SessionState::Processing;
        let out = self.outstanding.take().expect("checked above");
        let record = TrialLogRecord {
            timestamp_ms: now_ms(),
            trial_id: trial_id.to_string(),
            condition,
            stimuli: out.payload.stimuli.iter().map(|s| s.token.clone()).collect(),
            response: answer.clone(),
        };
        if let Some(path) = &self.log_path {
            let file = std::fs::OpenOptions::new().create(true).append(true).open(path);
            if let Ok(mut f) = file {
                let _ = sce_core::protocols::append_jsonl(&mut f, &record);
            }
        }
        self.log.push(record);
        // issue the next trial right away so a live session always has
        // exactly one outstanding trial
        self.last_active = Instant::now();
        let next = self.current_trial(ctx)?;
        let ack = json!({
            "accepted": true,
            "trial_id": trial_id,
            "state": self.state,
            "answered": self.log.len(),
            "next_trial_id": next.map(|t| t.trial_id),
        });
        self.answered.insert(
            trial_id.to_string(),
            Answered {
                answer,
                ack: ack.clone(),
            },
        );
        Ok(ack)
    }

    pub fn results(&self) -> Result<Value, ApiError> {
        let mut body = match &self.engine {
            Engine::Ga(g) => g.results(),
            Engine::Listening(l) => l.results()?,
        };
        body["session_id"] = json!(self.id);
        body["kind"] = json!(self.kind);
        body["state"] = json!(self.state);
        body["timed_out"] = json!(self.timed_out);
        body["responses"] = json!(self.log.len());
        Ok(body)
    }
}
