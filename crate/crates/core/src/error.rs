use std::path::PathBuf;

use thiserror::Error;

use crate::embedding::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid embedding set: {}", join_diagnostics(.0))]
    InvalidSet(Vec<Diagnostic>),

    #[error("invalid alignment pairs: {}", join_diagnostics(.0))]
    InvalidPairs(Vec<Diagnostic>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "normal matrix is rank deficient (min/max pivot ratio {ratio:.3e}); \
         fit with a positive ridge_lambda"
    )]
    RankDeficient { ratio: f64 },

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("query id mismatch between runs: {0}")]
    QueryMismatch(String),

    #[error(
        "target mean cosine {target:.4} unreachable by noise; achievable range [{low:.4}, {high:.4}]"
    )]
    UnreachableTarget { target: f64, low: f64, high: f64 },

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::TrainingDiverged { .. }
                | Error::UnreachableTarget { .. }
        )
    }
}

const SHOWN_DIAGNOSTICS: usize = 5;

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    let mut out = diags
        .iter()
        .take(SHOWN_DIAGNOSTICS)
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if diags.len() > SHOWN_DIAGNOSTICS {
        out.push_str(&format!("; and {} more", diags.len() - SHOWN_DIAGNOSTICS));
    }
    out
}

/// Errors raised while reading or writing the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad magic {found:?}", .path.display())]
    BadMagic { path: PathBuf, found: Vec<u8> },

    #[error("{}: unsupported version {found} (expected {expected})", .path.display())]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{}: truncated header ({actual} of {expected} bytes)", .path.display())]
    TruncatedHeader {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: truncated payload, expected {expected} bytes but found {actual}", .path.display())]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: {actual} trailing bytes after the {expected}-byte payload", .path.display())]
    TrailingBytes {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: id file has {actual} lines but the matrix has {expected} rows", .path.display())]
    IdCountMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: model kind is {found:?}, expected {expected:?}", .path.display())]
    KindMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: header declares {declared} parameters but payload holds {actual}", .path.display())]
    ParamCountMismatch {
        path: PathBuf,
        declared: u64,
        actual: u64,
    },

    #[error("{}: malformed header: {message}", .path.display())]
    BadHeader { path: PathBuf, message: String },

    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl FormatError {
    /// Stable short code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::Io { .. } => "io",
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::VersionMismatch { .. } => "version-mismatch",
            FormatError::TruncatedHeader { .. } => "truncated-header",
            FormatError::TruncatedPayload { .. } => "truncated-payload",
            FormatError::TrailingBytes { .. } => "trailing-bytes",
            FormatError::IdCountMismatch { .. } => "id-count-mismatch",
            FormatError::KindMismatch { .. } => "kind-mismatch",
            FormatError::ParamCountMismatch { .. } => "param-count-mismatch",
            FormatError::BadHeader { .. } => "bad-header",
            FormatError::Parse { .. } => "parse",
        }
    }
}
