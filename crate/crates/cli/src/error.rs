use std::path::PathBuf;

use lbe_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream artifact {}: run the `{stage}` stage first", path.display())]
    Dependency { path: PathBuf, stage: &'static str },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Core(e) => core_exit_code(e),
            CliError::Io { .. } | CliError::Json { .. } => 1,
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) | CoreError::Schema(_) | CoreError::Parse { .. } => 2,
        CoreError::Numerical(_)
        | CoreError::InsufficientData(_)
        | CoreError::Separation(_)
        | CoreError::Domain(_)
        | CoreError::Aggregation(_) => 4,
        CoreError::AtRow { source, .. } => core_exit_code(source),
        _ => 1,
    }
}

pub fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}
