use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("pitch-class profile has zero variance")]
    DegenerateProfile,

    #[error("key accuracy undefined: reference correlation is zero")]
    Undefined,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("clip too long: {frames} frames exceeds the {max}-frame limit")]
    ClipTooLong { frames: usize, max: usize },

    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("codec mismatch: expected codebook hash {expected}, found {found}")]
    CodecMismatch { expected: String, found: String },

    #[error("model produced an empty generation after {attempts} attempts")]
    EmptyGeneration { attempts: usize },

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Process exit code: 2 for bad configuration or input, 3 for a missing
    /// or incompatible upstream artifact, 4 when generation itself failed.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_)
            | Error::InvalidInput(_)
            | Error::Range(_)
            | Error::Format { .. }
            | Error::ClipTooLong { .. }
            | Error::InsufficientData(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::Dependency(_) | Error::CodecMismatch { .. } => 3,
            _ => 4,
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_cause() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Dependency("x".into()).in_stage("stage1").exit_code(), 3);
        assert_eq!(Error::EmptyGeneration { attempts: 3 }.in_stage("stage0").exit_code(), 4);
        let mismatch = Error::CodecMismatch { expected: "a".into(), found: "b".into() };
        assert_eq!(mismatch.exit_code(), 3);
    }
}
