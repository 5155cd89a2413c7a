use std::fmt;

use thiserror::Error;

/// One problem found while validating a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    /// Dotted field path, or empty for syntax errors.
    pub field: String,
    pub message: String,
    /// 1-based line and column for syntax errors.
    pub location: Option<(usize, usize)>,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.location, self.field.is_empty()) {
            (Some((l, c)), _) => write!(f, "line {l}, column {c}: {}", self.message),
            (None, false) => write!(f, "{}: {}", self.field, self.message),
            (None, true) => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("; "))
    }
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config: {0}")]
    Config(ConfigErrors),

    #[error(transparent)]
    Core(#[from] tina_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("run aborted: {failed} of {total} samples failed in arm {arm}")]
    Aborted { arm: String, failed: usize, total: usize },

    #[error("manifest check failed: {0}")]
    Manifest(String),

    #[error("{0}")]
    Usage(String),
}

/// Error classes with distinct process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
    Other,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Other => 1,
            ErrorClass::Config => 2,
            ErrorClass::Numeric => 3,
            ErrorClass::Io => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Io => "io",
            ErrorClass::Other => "error",
        }
    }
}

impl LabError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use tina_core::Error as E;
        match self {
            LabError::Config(_) | LabError::Usage(_) => ErrorClass::Config,
            LabError::Io { .. } | LabError::Csv(_) => ErrorClass::Io,
            LabError::Core(e) => match e {
                E::Numeric { .. } | E::Training { .. } => ErrorClass::Numeric,
                E::Io(_) => ErrorClass::Io,
                E::Parameter(_) | E::Condition(_) | E::Index { .. } => ErrorClass::Config,
                _ => ErrorClass::Other,
            },
            LabError::Aborted { .. } => ErrorClass::Numeric,
            LabError::Json(_) | LabError::Manifest(_) => ErrorClass::Other,
        }
    }
}

impl From<ConfigErrors> for LabError {
    fn from(e: ConfigErrors) -> Self {
        LabError::Config(e)
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
