use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: rydcrit::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn stage(stage: &'static str) -> impl FnOnce(rydcrit::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// Process exit status: 2 config, 3 capacity, 4 convergence,
    /// 5 bootstrap instability, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use rydcrit::Error as E;
        match self {
            CliError::Config { .. } => 2,
            CliError::Capacity(_) => 3,
            CliError::Stage { source, .. } => match source.root() {
                E::Capacity { .. } => 3,
                E::Convergence { .. } | E::Integration { .. } => 4,
                E::BootstrapInstability { .. } => 5,
                _ => 1,
            },
            CliError::Io { .. } => 1,
        }
    }
}
