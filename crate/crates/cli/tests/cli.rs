use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use sce_core::audio::{wav_bytes, write_wav, AudioBuffer};
use sce_core::enhance::SceParams;
use sce_core::mixing::{mix_at_smr, MixSpec};
use sce_core::pipeline::{process, ProcessOptions, Processing, Stimulus};
use sce_core::synth::{self, SpeechLikeConfig};
use serde_json::{json, Value};

const RATE: u32 = 16_000;

fn sce(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sce"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let o = sce(args, cwd);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Manifest with the output directory blanked, for comparing runs.
fn manifest_sans_out(p: impl AsRef<Path>) -> Value {
    let mut m = read_json(p);
    m["run"]["out"] = Value::Null;
    m
}

fn speech(seed: u64, secs: f64) -> AudioBuffer {
    let cfg = SpeechLikeConfig {
        duration_s: secs,
        ..Default::default()
    };
    synth::speech_like(&cfg, seed).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        write_wav(f.path("clean.wav"), &speech(1, 1.0)).unwrap();
        write_wav(f.path("noise.wav"), &synth::white_noise(RATE as usize * 2, RATE, 0.05, 2)).unwrap();
        std::fs::write(
            f.path("params.json"),
            json!({"b": 1.0, "xi": 0.9, "m": 5, "s": 2.0}).to_string(),
        )
        .unwrap();
        std::fs::write(
            f.path("zero.json"),
            json!({"b": 1.0, "xi": 0.9, "m": 5, "s": 0.0}).to_string(),
        )
        .unwrap();
        f
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }
}

/// What the library produces for the fixture mixture with no enhancement.
fn unprocessed_reference(f: &Fixture, smr: f64) -> Vec<u8> {
    let t = sce_core::audio::read_wav(f.path("clean.wav")).unwrap();
    let m = sce_core::audio::read_wav(f.path("noise.wav")).unwrap();
    let mix = mix_at_smr(
        &t,
        &m,
        &MixSpec {
            smr_db: smr,
            ..Default::default()
        },
    )
    .unwrap();
    let opts = ProcessOptions {
        processing: Processing::Unprocessed,
        ..Default::default()
    };
    let p = SceParams {
        b: 1.0,
        xi: 0.9,
        m: 5,
        s: 0.0,
    };
    wav_bytes(&process(&Stimulus::from(mix), p, &opts).unwrap().audio).unwrap()
}

#[test]
fn enhance_with_zero_scale_is_transparent() {
    let f = Fixture::new();
    ok(
        &["enhance", "--clean", "clean.wav", "--masker", "noise.wav", "--params", "zero.json", "--out", "z"],
        f.root(),
    );
    assert_eq!(f.bytes("z/enhanced.wav"), unprocessed_reference(&f, 0.0));
}

#[test]
fn enhance_gated_off_everywhere_is_transparent() {
    let f = Fixture::new();
    ok(
        &[
            "enhance", "--clean", "clean.wav", "--masker", "noise.wav", "--params", "params.json",
            "--gate-threshold", "inf", "--out", "g",
        ],
        f.root(),
    );
    assert_eq!(f.bytes("g/enhanced.wav"), unprocessed_reference(&f, 0.0));
    let m = read_json(f.path("g/metrics.json"));
    assert_eq!(m["gated_fraction"], 0.0);
    let man = read_json(f.path("g/manifest.json"));
    assert_eq!(man["run"]["gate_threshold"], "inf");
}

#[test]
fn enhance_at_high_smr_gates_speech_on() {
    let f = Fixture::new();
    ok(
        &[
            "enhance", "--clean", "clean.wav", "--masker", "noise.wav", "--smr", "20", "--params",
            "params.json", "--out", "h",
        ],
        f.root(),
    );
    let m = read_json(f.path("h/metrics.json"));
    assert_eq!(m["processing"], "sce_isnr");
    let g = m["speech_gated_fraction"].as_f64().unwrap();
    assert!(g > 0.95, "{m}");
    assert_ne!(f.bytes("h/enhanced.wav"), unprocessed_reference(&f, 20.0));
    let csv = std::fs::read_to_string(f.path("h/snr.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, m["frames"].as_u64().unwrap() as usize);
    let man = read_json(f.path("h/manifest.json"));
    assert_eq!(man["inputs"].as_object().unwrap().len(), 3);
    assert_eq!(man["run"]["lead_ms"], 500.0);
}

#[test]
fn enhance_from_mixture_uses_estimated_snr() {
    let f = Fixture::new();
    ok(&["mix", "--target", "clean.wav", "--masker", "noise.wav", "--out", "mx"], f.root());
    ok(
        &["enhance", "--mixture", "mx/mixture.wav", "--params", "params.json", "--out", "e"],
        f.root(),
    );
    assert_eq!(read_json(f.path("e/metrics.json"))["processing"], "sce_esnr");
    assert!(f.path("e/snr.csv").exists());
    ok(
        &["enhance", "--mixture", "mx/mixture.wav", "--params", "params.json", "--ungated", "--out", "u"],
        f.root(),
    );
    let m = read_json(f.path("u/metrics.json"));
    assert_eq!(m["processing"], "sce");
    assert_eq!(m["gated_fraction"], 1.0);
    assert!(!f.path("u/snr.csv").exists());
}

#[test]
fn exit_codes_separate_validation_from_io() {
    let f = Fixture::new();
    let conflict = sce(
        &["enhance", "--mixture", "clean.wav", "--clean", "clean.wav", "--params", "params.json", "--out", "x"],
        f.root(),
    );
    assert_eq!(conflict.status.code(), Some(1));
    let missing_params = sce(&["enhance", "--mixture", "clean.wav", "--out", "x"], f.root());
    assert_eq!(missing_params.status.code(), Some(1));
    let missing_file = sce(
        &["enhance", "--mixture", "nope.wav", "--params", "params.json", "--out", "x"],
        f.root(),
    );
    assert_eq!(missing_file.status.code(), Some(2));
    std::fs::write(f.path("bad.json"), r#"{"b": 1.0, "xi": 0.9, "m": 5, "s": -1.0}"#).unwrap();
    let bad = sce(&["enhance", "--mixture", "clean.wav", "--params", "bad.json", "--out", "x"], f.root());
    assert_eq!(bad.status.code(), Some(1));
    std::fs::write(f.path("text.wav"), "not audio").unwrap();
    let corrupt = sce(&["enhance", "--mixture", "text.wav", "--params", "params.json", "--out", "x"], f.root());
    assert_eq!(corrupt.status.code(), Some(2));
    let help = sce(&["--help"], f.root());
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn mix_of_unit_rms_stems_at_zero_smr_keeps_masker_scale() {
    let f = Fixture::new();
    let square = |n: usize, period: usize| {
        AudioBuffer::new((0..n).map(|i| if (i / period) % 2 == 0 { 1.0 } else { -1.0 }).collect(), RATE)
            .unwrap()
    };
    // +/-1 square waves have unit RMS up to 16-bit rounding
    write_wav(f.path("t1.wav"), &square(16_000, 20)).unwrap();
    write_wav(f.path("m1.wav"), &square(24_000, 33)).unwrap();
    ok(&["mix", "--target", "t1.wav", "--masker", "m1.wav", "--smr", "0", "--out", "m"], f.root());
    let man = read_json(f.path("m/manifest.json"));
    assert!((man["report"]["masker_gain"].as_f64().unwrap() - 1.0).abs() < 1e-6, "{man}");
    assert_eq!(man["report"]["lead_ms"], 500.0);
    assert_eq!(man["report"]["lead_samples"], 8000);
    assert_eq!(man["report"]["masker_looped"], false);
    assert!(man["report"]["realized_smr_db"].as_f64().unwrap().abs() < 0.01);
}

#[test]
fn mix_accepts_a_stimulus_file() {
    let f = Fixture::new();
    std::fs::create_dir(f.path("set")).unwrap();
    std::fs::copy(f.path("clean.wav"), f.path("set/t.wav")).unwrap();
    std::fs::copy(f.path("noise.wav"), f.path("set/m.wav")).unwrap();
    std::fs::write(
        f.path("set/stim.json"),
        json!({"target_path": "t.wav", "masker_path": "m.wav", "smr_db": -3.0, "lead_ms": 250.0}).to_string(),
    )
    .unwrap();
    ok(&["mix", "--stimulus", "set/stim.json", "--out", "m"], f.root());
    let man = read_json(f.path("m/manifest.json"));
    assert_eq!(man["report"]["lead_samples"], 4000);
    assert!((man["report"]["realized_smr_db"].as_f64().unwrap() + 3.0).abs() < 0.01);
    assert_eq!(man["inputs"].as_object().unwrap().len(), 3);
}

#[test]
fn ssn_over_a_speech_folder_matches_its_ltas() {
    let f = Fixture::new();
    std::fs::create_dir(f.path("corpus")).unwrap();
    for k in 0..4 {
        write_wav(f.path(&format!("corpus/s{k}.wav")), &speech(40 + k, 2.0)).unwrap();
    }
    std::fs::write(f.path("corpus/readme.txt"), "ignored").unwrap();
    ok(&["ssn", "--corpus", "corpus", "--duration-s", "10", "--out", "n"], f.root());
    let man = read_json(f.path("n/manifest.json"));
    assert_eq!(man["report"]["corpus_files"], 4);
    assert_eq!(man["report"]["within_tolerance"], true, "{}", man["report"]);
    let csv = std::fs::read_to_string(f.path("n/ltas.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, man["report"]["bands"].as_u64().unwrap() as usize);
    let noise = sce_core::audio::read_wav(f.path("n/ssn.wav")).unwrap();
    assert_eq!(noise.len(), 160_000);
}

#[test]
fn srt_sim_is_reproducible_and_unbiased() {
    let f = Fixture::new();
    ok(&["srt-sim", "--srt-true", "-4", "--runs", "1", "--seed", "9", "--out", "a"], f.root());
    ok(&["srt-sim", "--srt-true", "-4", "--runs", "1", "--seed", "9", "--out", "b"], f.root());
    assert_eq!(manifest_sans_out(f.path("a/manifest.json")), manifest_sans_out(f.path("b/manifest.json")));
    for name in ["trace.csv", "reversals.csv", "runs.csv", "summary.json"] {
        assert_eq!(f.bytes(&format!("a/{name}")), f.bytes(&format!("b/{name}")), "{name}");
    }
    assert_eq!(std::fs::read_to_string(f.path("a/trace.csv")).unwrap().lines().count(), 21);

    ok(&["srt-sim", "--srt-true", "-4", "--slope", "10", "--runs", "50", "--out", "steep"], f.root());
    let s = read_json(f.path("steep/summary.json"));
    assert!(s["mean_bias_db"].as_f64().unwrap().abs() <= 1.0, "{s}");

    ok(&["srt-sim", "--srt-true", "2", "--runs", "100", "--out", "many"], f.root());
    let s = read_json(f.path("many/summary.json"));
    assert!(s["mean_bias_db"].as_f64().unwrap().abs() <= 1.0, "{s}");
    assert_eq!(s["failed_runs"], 0);
}

fn ga_args<'a>(out: &'a str, grid: &'a str) -> Vec<&'a str> {
    vec![
        "ga", "--target", "clean.wav", "--masker", "noise.wav", "--grid", grid, "--max-generations", "4",
        "--seed", "3", "--out", out,
    ]
}

#[test]
fn ga_is_deterministic_and_writes_its_reports() {
    let f = Fixture::new();
    ok(&ga_args("g1", "experiment-one"), f.root());
    ok(&ga_args("g2", "experiment-one"), f.root());
    assert_eq!(manifest_sans_out(f.path("g1/manifest.json")), manifest_sans_out(f.path("g2/manifest.json")));
    for name in ["history.json", "best.json", "best_params.json", "convergence.csv"] {
        assert_eq!(f.bytes(&format!("g1/{name}")), f.bytes(&format!("g2/{name}")), "{name}");
    }
    let conv = std::fs::read_to_string(f.path("g1/convergence.csv")).unwrap();
    assert!(conv.starts_with("generation,best_score,mean_score,b,xi,m,s\n"));
    let gens = conv.lines().count() - 1;
    assert!((1..=4).contains(&gens));
    // the best parameters feed straight back into enhance
    ok(
        &["enhance", "--clean", "clean.wav", "--masker", "noise.wav", "--params", "g1/best_params.json", "--out", "e"],
        f.root(),
    );
}

#[test]
fn ga_on_the_reduced_grid_keeps_xi_and_m_fixed() {
    let f = Fixture::new();
    ok(&ga_args("g", "experiment-two"), f.root());
    let h = read_json(f.path("g/history.json"));
    for gen in h["generations"].as_array().unwrap() {
        for g in gen["genomes"].as_array().unwrap() {
            assert_eq!(g["xi"], 0);
            assert_eq!(g["m"], 0);
        }
    }
    let p = read_json(f.path("g/best_params.json"));
    assert_eq!(p["xi"], 0.9);
    assert_eq!(p["m"], 5);
}

fn write_bench_set(f: &Fixture) {
    let mut list = Vec::new();
    for (k, smr) in [-3.0, 0.0, 3.0].iter().enumerate() {
        write_wav(f.path(&format!("bt{k}.wav")), &speech(70 + k as u64, 1.5)).unwrap();
        list.push(json!({"target_path": format!("bt{k}.wav"), "masker_path": "noise.wav", "smr_db": smr}));
    }
    std::fs::write(f.path("bench.json"), Value::Array(list).to_string()).unwrap();
}

#[test]
fn snr_bench_self_comparison_is_perfect() {
    let f = Fixture::new();
    write_bench_set(&f);
    ok(&["snr-bench", "--stimuli", "bench.json", "--estimator", "isnr", "--out", "b"], f.root());
    let s = read_json(f.path("b/summary.json"));
    assert!((s["pooled"]["correlation"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(s["pooled"]["gate_agreement"], 1.0);
    assert_eq!(s["pooled"]["mean_abs_error_db"], 0.0);
    assert_eq!(s["per_stimulus"].as_array().unwrap().len(), 3);
}

#[test]
fn snr_bench_reports_the_estimator() {
    let f = Fixture::new();
    write_bench_set(&f);
    ok(&["snr-bench", "--stimuli", "bench.json", "--out", "b"], f.root());
    let s = read_json(f.path("b/summary.json"));
    assert_eq!(s["estimator"], "esnr");
    let agree = s["pooled"]["gate_agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agree));
    let csv = std::fs::read_to_string(f.path("b/frames.csv")).unwrap();
    assert!(csv.starts_with("stimulus,frame,time_s,isnr_db,estimate_db,selected\n"));
    let selected = csv.lines().skip(1).filter(|l| l.ends_with(",1")).count();
    assert_eq!(selected as u64, s["pooled"]["frames"].as_u64().unwrap());
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let f = Fixture::new();
    ok(
        &["enhance", "--clean", "clean.wav", "--masker", "noise.wav", "--params", "params.json", "--out", "first"],
        f.root(),
    );
    ok(&["rerun", "first/manifest.json", "--out", "second"], f.root());
    assert_eq!(
        manifest_sans_out(f.path("first/manifest.json")),
        manifest_sans_out(f.path("second/manifest.json"))
    );
    assert_eq!(f.bytes("first/enhanced.wav"), f.bytes("second/enhanced.wav"));

    // a changed input is refused
    write_wav(f.path("clean.wav"), &speech(2, 1.0)).unwrap();
    let o = sce(&["rerun", "first/manifest.json", "--out", "third"], f.root());
    assert_eq!(o.status.code(), Some(1));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(port: u16, cwd: &Path) -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_sce"))
        .args(["serve", "--port", &port.to_string()])
        .current_dir(cwd)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    (Server(child), addr)
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_answers_health_and_refuses_a_taken_port() {
    let f = Fixture::new();
    let (_server, addr) = start_server(0, f.root());
    let resp = http_get(&addr, "/health");
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(env!("CARGO_PKG_VERSION")));

    let port = addr.rsplit(':').next().unwrap();
    let second = sce(&["serve", "--port", port], f.root());
    assert_eq!(second.status.code(), Some(2));
}
