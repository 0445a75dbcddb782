use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants map onto the CLI exit codes: configuration and validation
/// problems exit with 1, numerical failures with 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing configuration key `{0}`")]
    MissingKey(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("root bracketing failed for {family} in [{lo}, {hi}]")]
    RootBracket { family: String, lo: f64, hi: f64 },

    #[error("pose unreachable: {0}")]
    Unreachable(String),

    #[error("singular configuration: {0}")]
    Singular(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank error: requested {requested}, data supports {available}")]
    Rank { requested: usize, available: usize },

    #[error("identification failed: {0}")]
    Identification(String),

    #[error("ambiguous mode-shape selection: {first} ({first_coef:.4}) vs {second} ({second_coef:.4})")]
    Ambiguous { first: String, first_coef: f64, second: String, second_coef: f64 },

    #[error("training diverged at epoch {epoch}")]
    Training { epoch: usize },

    #[error("plant failure after {steps} steps: {reason}")]
    PartialData { steps: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Process exit code associated with the error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::MissingKey(_)
            | Error::Validation(_)
            | Error::Domain(_)
            | Error::Dimension { .. }
            | Error::Unreachable(_)
            | Error::Io { .. }
            | Error::Serde(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
