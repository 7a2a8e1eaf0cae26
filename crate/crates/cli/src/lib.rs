//! Batch drivers for the word-level diarization transducer: corpus simulation,
//! two-phase training, decoding, baseline orchestration, scoring and the
//! tap-layer ablation.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::RunConfig;

/// A problem with how the tool was invoked: bad flags, config values that
/// contradict each other, an output that would be clobbered.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Failure class reported on exit; the discriminant is the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Internal = 1,
    Usage = 2,
    Config = 3,
    Io = 4,
    Data = 5,
    Model = 6,
}

impl ErrorCategory {
    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Internal => "internal",
            ErrorCategory::Usage => "usage",
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Data => "data",
            ErrorCategory::Model => "model",
        }
    }

    pub fn exit_code(self) -> i32 {
        self as i32
    }
}

/// Classifies by the innermost recognizable cause.
pub fn categorize(err: &anyhow::Error) -> ErrorCategory {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return ErrorCategory::Usage;
        }
        if cause.is::<toml::de::Error>() || cause.is::<toml::ser::Error>() {
            return ErrorCategory::Config;
        }
        if cause.is::<std::io::Error>() {
            return ErrorCategory::Io;
        }
        if let Some(e) = cause.downcast_ref::<weend::Error>() {
            use weend::Error as E;
            return match e {
                E::Io(_) => ErrorCategory::Io,
                E::Parse { .. } | E::Format(_) | E::Json(_) | E::OutOfVocabulary(_) | E::TooManySpeakers { .. } => {
                    ErrorCategory::Data
                }
                E::Dimension { .. } | E::Range { .. } | E::Numeric(_) | E::Domain(_) => ErrorCategory::Model,
                E::Invalid(_) => ErrorCategory::Config,
            };
        }
        if cause.is::<serde_json::Error>() {
            return ErrorCategory::Data;
        }
    }
    ErrorCategory::Internal
}
