use std::fmt;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An op produced NaN or infinity.
    #[error("numeric fault in {op} (node {node})")]
    Numeric { op: &'static str, node: usize },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    /// A training step failed; `component` names the loss term or phase.
    #[error("training step aborted in {component}: {source}")]
    Step {
        component: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the root cause is a non-finite value.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric { .. } => true,
            Error::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

/// One unrecognized key in a configuration document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownKey {
    pub key: String,
    pub suggestion: Option<String>,
}

/// Configuration problems, reported all at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub unknown: Vec<UnknownKey>,
    pub invalid: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for u in &self.unknown {
            if !first {
                f.write_str("; ")?;
            }
            first = false;
            match &u.suggestion {
                Some(s) => write!(f, "unknown config key \"{}\" (did you mean \"{}\"?)", u.key, s)?,
                None => write!(f, "unknown config key \"{}\"", u.key)?,
            }
        }
        for msg in &self.invalid {
            if !first {
                f.write_str("; ")?;
            }
            first = false;
            f.write_str(msg)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}
