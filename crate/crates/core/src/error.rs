use std::fmt;

use crate::ga::GaHistory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Buffer holds fewer samples than one analysis frame.
    InputTooShort { len: usize, frame_len: usize },
    MalformedTrack(String),
    MalformedInput(String),
    /// Argument outside the mathematical domain of a formula.
    Domain(String),
    Config(String),
    Alignment(String),
    Stimulus(String),
    /// Operation not allowed in the current state of a state machine.
    State(String),
    InsufficientData(String),
    Validation(String),
    NonMono { channels: u16 },
    UnsupportedFormat(String),
    RateMismatch { expected: u32, found: u32 },
    /// External judgment session was abandoned; the GA history so far is kept.
    SessionTimeout { history: Box<GaHistory> },
    Io(std::io::Error),
    Wav(hound::Error),
    Json(serde_json::Error),
}

impl Error {
    /// True for failures of the filesystem or file decoding rather than of
    /// the caller's arguments.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Wav(_) | Error::NonMono { .. } | Error::UnsupportedFormat(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InputTooShort { len, frame_len } => write!(
                f,
                "input too short: {len} samples, need at least one frame of {frame_len}"
            ),
            Error::MalformedTrack(msg) => write!(f, "malformed track: {msg}"),
            Error::MalformedInput(msg) => write!(f, "malformed input: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Alignment(msg) => write!(f, "alignment error: {msg}"),
            Error::Stimulus(msg) => write!(f, "stimulus error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::Validation(msg) => write!(f, "validation error: {msg}"),
            Error::NonMono { channels } => write!(f, "non-mono input: {channels} channels"),
            Error::UnsupportedFormat(msg) => write!(f, "unsupported format: {msg}"),
            Error::RateMismatch { expected, found } => write!(
                f,
                "sample rate mismatch: expected {expected} Hz, found {found} Hz"
            ),
            Error::SessionTimeout { history } => write!(
                f,
                "session timeout after {} generation(s)",
                history.generations.len()
            ),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Wav(e) => write!(f, "wav error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Wav(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            hound::Error::IoError(io) => Error::Io(io),
            other => Error::Wav(other),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
