//! Command-line arguments. Every run command is also serializable so its
//! manifest can repeat it.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "sce", version, about = "SNR-gated spectral-change enhancement experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: RunCommand,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunCommand {
    /// Enhance a mixture (from stems, gated by iSNR; or given, gated by eSNR).
    Enhance(EnhanceArgs),
    /// Mix a target and masker at an SMR with a masker lead.
    Mix(MixArgs),
    /// Make speech-shaped noise from a speech corpus.
    Ssn(SsnArgs),
    /// Monte-Carlo check of the adaptive SRT staircase.
    SrtSim(SrtSimArgs),
    /// Fit enhancement parameters with the GA against an objective fitness.
    Ga(GaArgs),
    /// Compare the estimated SNR against the ideal SNR per frame.
    SnrBench(SnrBenchArgs),
    /// Run the listening-session HTTP service.
    #[serde(skip)]
    Serve(ServeArgs),
    /// Repeat a run recorded in a manifest.
    #[serde(skip)]
    Rerun(RerunArgs),
}

/// Serializes +/-inf as strings so thresholds like `inf` survive JSON.
mod db_value {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EnhanceArgs {
    /// Clean target WAV; needs --masker.
    #[arg(long, requires = "masker", conflicts_with = "mixture")]
    pub clean: Option<PathBuf>,
    /// Masker WAV; needs --clean.
    #[arg(long, requires = "clean", conflicts_with = "mixture")]
    pub masker: Option<PathBuf>,
    /// Target-to-masker ratio for mixing the stems, dB.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub smr: f64,
    /// Masker onset ahead of the target, ms.
    #[arg(long, default_value_t = 500.0)]
    pub lead_ms: f64,
    /// Ready-made mixture WAV; the SNR is then estimated from it.
    #[arg(long, required_unless_present = "clean")]
    pub mixture: Option<PathBuf>,
    /// JSON file with b, xi, m, s.
    #[arg(long)]
    pub params: PathBuf,
    /// Enhance frames whose SNR is at least this, dB.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    #[serde(with = "db_value")]
    pub gate_threshold: f64,
    /// Enhance every frame regardless of SNR.
    #[arg(long)]
    pub ungated: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// A target/masker pair as listed in a stimulus file. Paths are relative to
/// the file that lists them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSpec {
    pub target_path: PathBuf,
    pub masker_path: PathBuf,
    pub smr_db: f64,
    #[serde(default = "default_lead_ms")]
    pub lead_ms: f64,
}

fn default_lead_ms() -> f64 {
    500.0
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MixArgs {
    #[arg(long, required_unless_present = "stimulus", conflicts_with = "stimulus")]
    pub target: Option<PathBuf>,
    #[arg(long, required_unless_present = "stimulus", conflicts_with = "stimulus")]
    pub masker: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub smr: f64,
    #[arg(long, default_value_t = 500.0)]
    pub lead_ms: f64,
    /// JSON stimulus file {target_path, masker_path, smr_db, lead_ms}
    /// instead of the flags above.
    #[arg(long)]
    pub stimulus: Option<PathBuf>,
    /// Fail instead of looping a masker that is too short.
    #[arg(long)]
    pub no_loop: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SsnArgs {
    /// WAV files or directories of WAV files.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// LTAS resolution.
    #[arg(long, default_value_t = 1024)]
    pub nfft: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SrtSimArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub srt_true: f64,
    /// Logistic slope of the simulated listener, per dB.
    #[arg(long, default_value_t = 1.0)]
    pub slope: f64,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridArg {
    /// All four parameters free.
    ExperimentOne,
    /// xi and m fixed.
    ExperimentTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessingArg {
    Sce,
    SceIsnr,
    SceEsnr,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GaArgs {
    #[arg(long, requires = "masker", conflicts_with = "stimuli")]
    pub target: Option<PathBuf>,
    #[arg(long, requires = "target", conflicts_with = "stimuli")]
    pub masker: Option<PathBuf>,
    /// SMR for --target/--masker; ideally the listener's SRT.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub smr: f64,
    /// JSON list of stimulus specs to average the fitness over.
    #[arg(long, required_unless_present = "target")]
    pub stimuli: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridArg::ExperimentOne)]
    pub grid: GridArg,
    #[arg(long, value_enum, default_value_t = ProcessingArg::SceIsnr)]
    pub processing: ProcessingArg,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    #[serde(with = "db_value")]
    pub gate_threshold: f64,
    #[arg(long, default_value_t = 8)]
    pub population: usize,
    #[arg(long, default_value_t = 15)]
    pub max_generations: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub mutation_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    /// Envelope-based estimate from the mixture.
    Esnr,
    /// The ideal SNR itself; a self-check of the report.
    Isnr,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SnrBenchArgs {
    /// JSON list of stimulus specs.
    #[arg(long)]
    pub stimuli: PathBuf,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Esnr)]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub gate_threshold: f64,
    /// Frames count only when their iSNR lies in [min, max] dB.
    #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
    pub isnr_min: f64,
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub isnr_max: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = ".")]
    pub stimulus_dir: PathBuf,
    /// Write one JSON-lines log per session here.
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
