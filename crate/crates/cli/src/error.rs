use serde::Serialize;
use stoplab::LabError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
    message: String,
    exit_code: i32,
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config { field: field.into(), message: message.to_string() }
    }

    /// Maps a core error raised while handling `field`.
    pub fn from_lab(field: &str, e: LabError) -> Self {
        match e {
            LabError::NumericalBlowup { .. }
            | LabError::NonPositiveRate { .. }
            | LabError::DegenerateStoppingFamily { .. }
            | LabError::InsufficientIntrinsicTime { .. }
            | LabError::InsufficientSamples { .. }
            | LabError::InvalidStopOrder { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::config(field, e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 2,
        }
    }

    /// One-line JSON record for standard error.
    pub fn record(&self) -> String {
        let (kind, field, message) = match self {
            CliError::Config { field, message } => ("config", Some(field.as_str()), message.clone()),
            CliError::Numerical(m) => ("numerical", None, m.clone()),
            CliError::Io { path, message } => ("io", Some(path.as_str()), message.clone()),
        };
        let rec = ErrorRecord { error: kind, field, message, exit_code: self.exit_code() };
        serde_json::to_string(&rec).expect("error record serializes")
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
