use epimask::evaluation::EvalError;
use epimask::geometry::GeometryError;
use epimask::groundtruth::GtError;
use epimask::io::IoError;
use epimask::matcher::MatcherError;
use epimask::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("{0}")]
    Data(String),
    #[error("numerical degeneracy: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), msg: msg.into() }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<GtError> for CliError {
    fn from(e: GtError) -> Self {
        match e {
            GtError::Config { field, msg } => CliError::config(format!("scene.{field}"), msg),
        }
    }
}

impl From<MatcherError> for CliError {
    fn from(e: MatcherError) -> Self {
        match e {
            MatcherError::Config { field, msg } => CliError::config(format!("matcher.{field}"), msg),
            MatcherError::HashMismatch { .. } => CliError::Usage(e.to_string()),
            MatcherError::File(io) => io.into(),
            MatcherError::Weights(_) => CliError::Data(e.to_string()),
            MatcherError::Geometry(g) => g.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Matcher(m) => m.into(),
            EvalError::Geometry(g) => g.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { field, msg } => CliError::config(format!("train.{field}"), msg),
            TrainError::Matcher(m) => m.into(),
            TrainError::Geometry(g) => g.into(),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
