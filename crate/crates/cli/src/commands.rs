//! One function per subcommand. Each writes its outputs plus a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde_json::json;

use sce_core::audio::{read_wav, AudioBuffer, StftConfig};
use sce_core::enhance::SceParams;
use sce_core::ga::{run_ga, GaConfig, ObjectiveLsd, ParamGrid};
use sce_core::metrics::activity_mask;
use sce_core::mixing::{compare_ltas, make_ssn, mix_at_smr, MixResult, MixSpec, SsnOptions};
use sce_core::pipeline::{process, ProcessOptions, Processing, Stimulus};
use sce_core::protocols::{run_staircase, simulate_srt, SimListener, StaircaseConfig};
use sce_core::snr::{compare_tracks, esnr_track, isnr_track, EsnrConfig, GateConfig, SnrTrack};

use crate::args::*;
use crate::manifest::{digest_file, io_err, read_manifest, verify_inputs, CliError, CliResult, Manifest, OutputDir};

/// LTAS match is judged over these bands.
const LTAS_LO_HZ: f64 = 200.0;
const LTAS_HI_HZ: f64 = 6000.0;
const LTAS_TOLERANCE_DB: f64 = 2.0;

/// Runs a command; returns the manifest for commands that write one.
pub fn run(cmd: RunCommand) -> CliResult<Option<Manifest>> {
    let m = match &cmd {
        RunCommand::Enhance(a) => enhance(a, &cmd)?,
        RunCommand::Mix(a) => mix(a, &cmd)?,
        RunCommand::Ssn(a) => ssn(a, &cmd)?,
        RunCommand::SrtSim(a) => srt_sim(a, &cmd)?,
        RunCommand::Ga(a) => ga(a, &cmd)?,
        RunCommand::SnrBench(a) => snr_bench(a, &cmd)?,
        RunCommand::Serve(a) => {
            serve(a)?;
            return Ok(None);
        }
        RunCommand::Rerun(a) => return rerun(a),
    };
    Ok(Some(m))
}

fn rerun(a: &RerunArgs) -> CliResult<Option<Manifest>> {
    let m = read_manifest(&a.manifest)?;
    verify_inputs(&m)?;
    let mut cmd = m.run;
    if let Some(out) = &a.out {
        match &mut cmd {
            RunCommand::Enhance(x) => x.out = out.clone(),
            RunCommand::Mix(x) => x.out = out.clone(),
            RunCommand::Ssn(x) => x.out = out.clone(),
            RunCommand::SrtSim(x) => x.out = out.clone(),
            RunCommand::Ga(x) => x.out = out.clone(),
            RunCommand::SnrBench(x) => x.out = out.clone(),
            RunCommand::Serve(_) | RunCommand::Rerun(_) => {
                return Err(CliError::Validation("manifest does not describe a batch run".into()))
            }
        }
    }
    run(cmd)
}

#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn add(&mut self, path: &Path) -> CliResult<()> {
        self.0.insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    fn wav(&mut self, path: &Path) -> CliResult<AudioBuffer> {
        self.add(path)?;
        Ok(read_wav(path)?)
    }
}

fn validation(m: impl Into<String>) -> CliError {
    CliError::Validation(m.into())
}

fn mix_spec(smr_db: f64, lead_ms: f64, allow_loop: bool) -> MixSpec {
    MixSpec {
        smr_db,
        masker_lead_ms: lead_ms,
        allow_loop,
        ..Default::default()
    }
}

/// Reads a JSON list (or a single object) of stimulus specs, with paths
/// resolved against the file's directory.
fn read_stimulus_specs(path: &Path, inputs: &mut Inputs) -> CliResult<Vec<StimulusSpec>> {
    inputs.add(path)?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    let list = if v.is_array() { v } else { serde_json::Value::Array(vec![v]) };
    let specs: Vec<StimulusSpec> =
        serde_json::from_value(list).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    if specs.is_empty() {
        return Err(validation(format!("{} lists no stimuli", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(specs
        .into_iter()
        .map(|s| StimulusSpec {
            target_path: base.join(&s.target_path),
            masker_path: base.join(&s.masker_path),
            ..s
        })
        .collect())
}

fn mix_spec_files(spec: &StimulusSpec, inputs: &mut Inputs) -> CliResult<MixResult> {
    let t = inputs.wav(&spec.target_path)?;
    let m = inputs.wav(&spec.masker_path)?;
    Ok(mix_at_smr(&t, &m, &mix_spec(spec.smr_db, spec.lead_ms, true))?)
}

fn enhance(a: &EnhanceArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    let mut inputs = Inputs::default();
    inputs.add(&a.params)?;
    let params = SceParams::from_json_file(&a.params)?;
    let (stim, gated_kind) = match (&a.clean, &a.masker, &a.mixture) {
        (Some(c), Some(m), None) => {
            let t = inputs.wav(c)?;
            let mk = inputs.wav(m)?;
            let mixed = mix_at_smr(&t, &mk, &mix_spec(a.smr, a.lead_ms, true))?;
            (Stimulus::from(mixed), Processing::SceIsnr)
        }
        (None, None, Some(x)) => (Stimulus::from_mixture(inputs.wav(x)?), Processing::SceEsnr),
        _ => return Err(validation("give either --clean and --masker, or --mixture")),
    };
    let opts = ProcessOptions {
        processing: if a.ungated { Processing::Sce } else { gated_kind },
        gate: GateConfig {
            threshold_db: a.gate_threshold,
        },
        ..Default::default()
    };
    let out = process(&stim, params, &opts)?;

    // gated fraction over frames where speech is present
    let activity_ref = stim.target.as_ref().unwrap_or(&stim.mixture);
    let active = activity_mask(activity_ref, opts.stft)?;
    let (mut n_active, mut n_on) = (0usize, 0usize);
    for (on, act) in out.schedule.iter().zip(&active) {
        if *act {
            n_active += 1;
            if *on != 0.0 {
                n_on += 1;
            }
        }
    }
    let speech_gated = (n_active > 0).then(|| n_on as f64 / n_active as f64);

    let peak = out.audio.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clipped = out.audio.samples().iter().filter(|v| v.abs() >= 1.0).count();
    if clipped > 0 {
        eprintln!("sce: warning: {clipped} samples exceed full scale (peak {peak:.3}) and are clipped in enhanced.wav");
    }

    let mut dir = OutputDir::create(&a.out)?;
    dir.write_wav("enhanced.wav", &out.audio)?;
    if stim.target.is_some() {
        dir.write_wav("mixture.wav", &stim.mixture)?;
    }
    if let Some(snr) = &out.snr {
        dir.write("snr.csv", snr.to_csv().as_bytes())?;
    }
    let metrics = json!({
        "processing": opts.processing,
        "params": params,
        "frames": out.metrics.frames,
        "gated_fraction": out.metrics.gated_fraction,
        "speech_frames": n_active,
        "speech_gated_fraction": speech_gated,
        "mean_abs_gain_db": out.metrics.mean_abs_gain_db,
        "max_abs_gain_db": out.metrics.max_abs_gain_db,
        "peak": peak,
        "clipped_samples": clipped,
    });
    dir.write_json("metrics.json", &metrics)?;
    dir.finish(cmd.clone(), inputs.0, metrics)
}

fn mix(a: &MixArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    let mut inputs = Inputs::default();
    let spec = match (&a.stimulus, &a.target, &a.masker) {
        (Some(p), None, None) => {
            let mut specs = read_stimulus_specs(p, &mut inputs)?;
            if specs.len() != 1 {
                return Err(validation("mix takes a stimulus file with exactly one entry"));
            }
            specs.remove(0)
        }
        (None, Some(t), Some(m)) => StimulusSpec {
            target_path: t.clone(),
            masker_path: m.clone(),
            smr_db: a.smr,
            lead_ms: a.lead_ms,
        },
        _ => return Err(validation("give either --stimulus or --target and --masker")),
    };
    let t = inputs.wav(&spec.target_path)?;
    let m = inputs.wav(&spec.masker_path)?;
    let ms = mix_spec(spec.smr_db, spec.lead_ms, !a.no_loop);
    let looped = m.len() < ms.lead_samples(t.sample_rate_hz()) + t.len();
    let mixed = mix_at_smr(&t, &m, &ms)?;
    let mut dir = OutputDir::create(&a.out)?;
    dir.write_wav("mixture.wav", &mixed.mixture)?;
    dir.write_wav("target.wav", &mixed.target)?;
    dir.write_wav("masker.wav", &mixed.masker)?;
    let report = json!({
        "smr_db": spec.smr_db,
        "lead_ms": spec.lead_ms,
        "lead_samples": mixed.lead_samples,
        "masker_gain": mixed.masker_gain,
        "realized_smr_db": mixed.realized_smr_db(),
        "masker_looped": looped,
        "samples": mixed.mixture.len(),
    });
    dir.finish(cmd.clone(), inputs.0, report)
}

fn is_wav(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn corpus_files(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && is_wav(f))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(validation("corpus holds no WAV files"));
    }
    Ok(out)
}

fn ssn(a: &SsnArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    let mut inputs = Inputs::default();
    let corpus = corpus_files(&a.corpus)?
        .iter()
        .map(|p| inputs.wav(p))
        .collect::<CliResult<Vec<_>>>()?;
    let noise = make_ssn(
        &corpus,
        a.duration_s,
        SsnOptions {
            nfft: a.nfft,
            seed: a.seed,
            ..Default::default()
        },
    )?;
    let bands = compare_ltas(&corpus, std::slice::from_ref(&noise), a.nfft, LTAS_LO_HZ, LTAS_HI_HZ)?;
    let mut csv = String::from("center_hz,corpus_db,ssn_db,diff_db\n");
    for b in &bands {
        let _ = writeln!(
            csv,
            "{:.3},{:.4},{:.4},{:.4}",
            b.center_hz, b.reference_db, b.candidate_db, b.diff_db
        );
    }
    let max_abs = bands.iter().map(|b| b.diff_db.abs()).fold(0.0, f64::max);
    let mut dir = OutputDir::create(&a.out)?;
    dir.write_wav("ssn.wav", &noise)?;
    dir.write("ltas.csv", csv.as_bytes())?;
    let report = json!({
        "corpus_files": corpus.len(),
        "bands": bands.len(),
        "band_range_hz": [LTAS_LO_HZ, LTAS_HI_HZ],
        "max_abs_diff_db": max_abs,
        "within_tolerance": max_abs <= LTAS_TOLERANCE_DB,
        "tolerance_db": LTAS_TOLERANCE_DB,
    });
    dir.finish(cmd.clone(), inputs.0, report)
}

fn srt_sim(a: &SrtSimArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    if a.runs == 0 {
        return Err(validation("--runs must be at least 1"));
    }
    let config = StaircaseConfig::default();
    let report = simulate_srt(a.srt_true, a.slope, a.runs, a.seed, config)?;
    let mut trace = String::from("run,sentence,smr_db\n");
    let mut reversals = String::from("run,index,smr_db\n");
    for i in 0..a.runs {
        let mut l = SimListener::new(a.srt_true, a.slope, a.seed.wrapping_add(i as u64))?;
        let st = run_staircase(&mut l, config)?;
        for (k, v) in st.presented_smrs.iter().enumerate() {
            let _ = writeln!(trace, "{i},{k},{v:.3}");
        }
        for (k, v) in st.reversal_smrs.iter().enumerate() {
            let _ = writeln!(reversals, "{i},{k},{v:.3}");
        }
    }
    let summary = json!({
        "srt_true_db": a.srt_true,
        "slope_per_db": a.slope,
        "runs": a.runs,
        "seed": a.seed,
        "mean_bias_db": report.mean_bias_db,
        "sd_db": report.sd_db,
        "failed_runs": report.failed_runs,
        "staircase": config,
    });
    let mut dir = OutputDir::create(&a.out)?;
    dir.write("runs.csv", report.to_csv(a.srt_true).as_bytes())?;
    dir.write("trace.csv", trace.as_bytes())?;
    dir.write("reversals.csv", reversals.as_bytes())?;
    dir.write_json("summary.json", &summary)?;
    dir.finish(cmd.clone(), inputs_none(), summary)
}

fn inputs_none() -> BTreeMap<String, String> {
    BTreeMap::new()
}

fn ga(a: &GaArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    let mut inputs = Inputs::default();
    let specs = match (&a.stimuli, &a.target, &a.masker) {
        (Some(p), None, None) => read_stimulus_specs(p, &mut inputs)?,
        (None, Some(t), Some(m)) => vec![StimulusSpec {
            target_path: t.clone(),
            masker_path: m.clone(),
            smr_db: a.smr,
            lead_ms: 500.0,
        }],
        _ => return Err(validation("give either --stimuli or --target and --masker")),
    };
    let stimuli = specs
        .iter()
        .map(|s| mix_spec_files(s, &mut inputs).map(Stimulus::from))
        .collect::<CliResult<Vec<_>>>()?;
    let grid = match a.grid {
        GridArg::ExperimentOne => ParamGrid::experiment_one(),
        GridArg::ExperimentTwo => ParamGrid::experiment_two(),
    };
    let processing = match a.processing {
        ProcessingArg::Sce => Processing::Sce,
        ProcessingArg::SceIsnr => Processing::SceIsnr,
        ProcessingArg::SceEsnr => Processing::SceEsnr,
    };
    let opts = ProcessOptions {
        processing,
        gate: GateConfig {
            threshold_db: a.gate_threshold,
        },
        ..Default::default()
    };
    let cfg = GaConfig {
        population_size: a.population,
        max_generations: a.max_generations,
        convergence_patience: a.patience,
        mutation_rate: a.mutation_rate,
        seed: a.seed,
        ..Default::default()
    };
    let mut fitness = ObjectiveLsd::new(stimuli, opts)?;
    let outcome = run_ga(&mut fitness, cfg, grid.clone())?;
    let best = json!({
        "genome": outcome.best,
        "params": outcome.best_params,
        "score": outcome.best_score,
        "generations": outcome.history.generations.len(),
    });
    let mut dir = OutputDir::create(&a.out)?;
    dir.write_json("history.json", &outcome.history)?;
    dir.write_json("best.json", &best)?;
    dir.write_json("best_params.json", &outcome.best_params)?;
    dir.write("convergence.csv", outcome.history.convergence_csv().as_bytes())?;
    let report = json!({ "best": best, "grid": grid, "ga": cfg });
    dir.finish(cmd.clone(), inputs.0, report)
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn snr_bench(a: &SnrBenchArgs, cmd: &RunCommand) -> CliResult<Manifest> {
    if !(a.isnr_min <= a.isnr_max) {
        return Err(validation("--isnr-min must not exceed --isnr-max"));
    }
    let mut inputs = Inputs::default();
    let specs = read_stimulus_specs(&a.stimuli, &mut inputs)?;
    let stft = StftConfig::default();
    let gate = GateConfig {
        threshold_db: a.gate_threshold,
    };
    let mut csv = String::from("stimulus,frame,time_s,isnr_db,estimate_db,selected\n");
    let (mut all_est, mut all_ref, mut all_sel) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_stimulus = Vec::new();
    let mut rate = None;
    for (k, spec) in specs.iter().enumerate() {
        let mixed = mix_spec_files(spec, &mut inputs)?;
        let reference = isnr_track(&mixed.target, &mixed.masker, stft)?;
        let estimate = match a.estimator {
            EstimatorArg::Esnr => esnr_track(&mixed.mixture, stft, EsnrConfig::default())?,
            EstimatorArg::Isnr => reference.clone(),
        };
        let active = activity_mask(&mixed.target, stft)?;
        let select: Vec<bool> = reference
            .snr_db
            .iter()
            .zip(&active)
            .map(|(r, act)| *act && *r >= a.isnr_min && *r <= a.isnr_max)
            .collect();
        for i in 0..reference.len() {
            let _ = writeln!(
                csv,
                "{k},{i},{:.6},{},{},{}",
                reference.frame_time_s(i),
                fmt_db(reference.snr_db[i]),
                fmt_db(estimate.snr_db[i]),
                u8::from(select[i])
            );
        }
        per_stimulus.push(json!({
            "stimulus": k,
            "smr_db": spec.smr_db,
            "comparison": compare_tracks(&estimate, &reference, &select, gate).ok(),
        }));
        rate = Some(reference.sample_rate_hz);
        all_est.extend(estimate.snr_db);
        all_ref.extend(reference.snr_db);
        all_sel.extend(select);
    }
    let pool = |v: Vec<f64>| SnrTrack {
        snr_db: v,
        config: stft,
        sample_rate_hz: rate.expect("at least one stimulus"),
    };
    let pooled = compare_tracks(&pool(all_est), &pool(all_ref), &all_sel, gate)?;
    let summary = json!({
        "estimator": a.estimator,
        "gate_threshold_db": a.gate_threshold,
        "isnr_range_db": [a.isnr_min, a.isnr_max],
        "pooled": pooled,
        "per_stimulus": per_stimulus,
    });
    let mut dir = OutputDir::create(&a.out)?;
    dir.write("frames.csv", csv.as_bytes())?;
    dir.write_json("summary.json", &summary)?;
    dir.finish(cmd.clone(), inputs.0, summary)
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| validation(format!("bad listen address: {e}")))?;
    let config = sce_service::ServiceConfig {
        stimulus_dir: a.stimulus_dir.clone(),
        log_dir: a.log_dir.clone(),
        ..Default::default()
    };
    if let Some(d) = &config.log_dir {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = sce_service::bind(addr)
            .await
            .map_err(|e| CliError::Io(format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!("listening on {local}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        sce_service::serve(listener, sce_service::AppState::new(config))
            .await
            .map_err(|e| CliError::Io(e.to_string()))
    })
}
