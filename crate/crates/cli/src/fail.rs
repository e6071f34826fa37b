//! Error kinds and exit codes.
//!
//! | code | kind               |
//! |------|--------------------|
//! | 0    | success            |
//! | 1    | runtime            |
//! | 2    | usage, invalid-config |
//! | 3    | missing-artifact   |
//! | 4    | output-exists      |
//! | 5    | check-failed       |
//!
//! Failures print one JSON line on stderr: `{"error":"<kind>","message":"..."}`.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Runtime,
    Usage,
    InvalidConfig,
    MissingArtifact,
    OutputExists,
    CheckFailed,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Runtime => 1,
            Kind::Usage | Kind::InvalidConfig => 2,
            Kind::MissingArtifact => 3,
            Kind::OutputExists => 4,
            Kind::CheckFailed => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Runtime => "runtime",
            Kind::Usage => "usage",
            Kind::InvalidConfig => "invalid-config",
            Kind::MissingArtifact => "missing-artifact",
            Kind::OutputExists => "output-exists",
            Kind::CheckFailed => "check-failed",
        }
    }
}

#[derive(Debug)]
pub struct Fail {
    pub kind: Kind,
    pub message: String,
}

impl Fail {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Fail {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.name(), self.message)
    }
}

impl std::error::Error for Fail {}

/// Kind of an arbitrary failure, looking through the error chain.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<ctxprune::Error>() {
            return match e {
                ctxprune::Error::MissingArtifact(_) | ctxprune::Error::UntrainedClassifier => {
                    Kind::MissingArtifact
                }
                ctxprune::Error::InvalidArgument(_) | ctxprune::Error::LayerOutOfRange { .. } => {
                    Kind::InvalidConfig
                }
                _ => Kind::Runtime,
            };
        }
    }
    Kind::Runtime
}

/// The single stderr line for a failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = classify(err);
    let message = match err.downcast_ref::<Fail>() {
        Some(f) => f.message.clone(),
        None => format!("{err:#}"),
    };
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind.name(), "message": message }).to_string()
}
