//! Run manifests, input digests and the CLI error type.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::args::RunCommand;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or inputs that fail a precondition.
    Validation(String),
    /// A file could not be read, decoded or written.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sce_core::error::Error> for CliError {
    fn from(e: sce_core::error::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Everything needed to audit or repeat a run. Contains no timestamps, so a
/// repeated run writes an identical manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub run: RunCommand,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific results worth reading without opening the outputs.
    pub report: Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Collects the files a command writes and emits them with a manifest.
pub struct OutputDir {
    dir: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Validation(format!("cannot serialize {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn write_wav(&mut self, name: &str, audio: &sce_core::audio::AudioBuffer) -> CliResult<()> {
        let bytes = sce_core::audio::wav_bytes(audio)?;
        self.write(name, &bytes)
    }

    pub fn finish(self, run: RunCommand, inputs: BTreeMap<String, String>, report: Value) -> CliResult<Manifest> {
        let m = Manifest {
            tool: "sce".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            run,
            inputs,
            outputs: self.outputs,
            report,
        };
        let mut text = serde_json::to_string_pretty(&m)
            .map_err(|e| CliError::Validation(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        let p = self.dir.join(MANIFEST_FILE);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Fails if any recorded input changed since the manifest was written.
pub fn verify_inputs(m: &Manifest) -> CliResult<()> {
    for (path, want) in &m.inputs {
        let got = digest_file(Path::new(path))?;
        if &got != want {
            return Err(CliError::Validation(format!(
                "input {path} changed since the manifest was written"
            )));
        }
    }
    Ok(())
}
