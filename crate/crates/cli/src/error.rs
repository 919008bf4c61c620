use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] carprune::Error),
    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.into(),
            source,
        }
    }

    /// Stable identifier and exit code for each failure class.
    pub fn kind(&self) -> (&'static str, i32) {
        use carprune::Error as E;
        match self {
            CliError::Usage(_) => ("usage", 2),
            CliError::Output { .. } => ("output", 3),
            CliError::Pool(_) => ("worker_pool", 4),
            CliError::Core(e) => match e {
                E::Io { .. } => ("io", 10),
                E::Format { .. } => ("format", 11),
                E::Truncated { .. } => ("truncated", 12),
                E::Checksum { .. } => ("checksum", 13),
                E::UnsupportedVersion(_) => ("unsupported_version", 14),
                E::Shape { .. } | E::InvalidNetwork(_) => ("shape", 15),
                E::InvalidFilter { .. } | E::NotConv(_) | E::NoSuccessor(_) | E::MissingFilter(_) => {
                    ("invalid_filter", 16)
                }
                E::EmptyDataset | E::LabelOutOfRange { .. } => ("dataset", 17),
                E::Divergence(_) => ("divergence", 18),
                E::EmptiedLayer(_) | E::ZeroParameters => ("emptied_layer", 19),
                E::InvalidArgument(_) => ("invalid_argument", 20),
                E::InconsistentTrace(_) => ("inconsistent_trace", 21),
                E::Csv(_) | E::Json(_) => ("serialization", 22),
            },
        }
    }

    /// One JSON object on one line.
    pub fn report_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        let (error, code) = self.kind();
        serde_json::to_string(&Line {
            error,
            code,
            message: self.to_string(),
        })
        .expect("string fields serialize")
    }
}
