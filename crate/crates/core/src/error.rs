use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite coordinates {0:?}")]
    NonFinite([f64; 4]),
    #[error("box coordinates {0:?} fall outside [0, 1]")]
    OutOfRange([f64; 4]),
    #[error("box {0:?} has zero or negative width/height")]
    Degenerate([f64; 4]),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("text contains reserved token literal {0:?}")]
    ReservedLiteral(String),
    #[error("reply does not match template at {segment}: {detail}")]
    Parse { segment: ReplySegment, detail: String },
    #[error("sample is invalid: {0}")]
    InvalidSample(String),
    #[error("vocabulary file is malformed: {0}")]
    Vocabulary(String),
}

/// Named segments of an assistant reply, in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplySegment {
    Prefix,
    Scope,
    Separator,
    Suggestion,
    Terminator,
}

impl std::fmt::Display for ReplySegment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReplySegment::Prefix => "prefix",
            ReplySegment::Scope => "scope slot",
            ReplySegment::Separator => "separator",
            ReplySegment::Suggestion => "suggestion",
            ReplySegment::Terminator => "terminator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image must be {expected}x{expected}x3, got {got}")]
    ImageShape { expected: usize, got: String },
    #[error("sequence has no IMAGE token")]
    MissingImageToken,
    #[error("sequence length {len} exceeds maximum {max}")]
    Overlong { len: usize, max: usize },
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image decode: {0}")]
    Image(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index} is invalid: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("text loss needs at least one supervised position")]
    EmptyMask,
    #[error("batch inconsistency: {0}")]
    Inconsistent(String),
    #[error("non-finite loss at step {step} (l_txt={l_txt}, l_loc={l_loc}); last good checkpoint: {checkpoint:?}")]
    Diverged {
        step: usize,
        l_txt: f64,
        l_loc: f64,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum FoundryError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("client contract violated: {0}")]
    Contract(String),
    #[error("image {0:?} is not in the manifest")]
    Manifest(String),
    #[error("{step} failed: {reason}")]
    Step {
        step: &'static str,
        reason: String,
        raw_reply: Option<String>,
    },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("build produced no samples ({pairs_failed} pair(s) failed{})", first_failure.as_ref().map(|f| format!("; first: {f}")).unwrap_or_default())]
    EmptyBuild {
        pairs_failed: usize,
        first_failure: Option<String>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records")]
    NoRecords,
    #[error("ballot {ballot}: {reason}")]
    InvalidBallot { ballot: String, reason: String },
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
