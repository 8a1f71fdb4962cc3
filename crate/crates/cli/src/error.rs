use thiserror::Error;

/// Failures of a CLI run, each mapped to a documented exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] lflow::Error),
}

impl CliError {
    /// 2 config, 3 input format, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Core(e) => core_code(e),
        }
    }
}

fn core_code(e: &lflow::Error) -> i32 {
    use lflow::Error as E;
    match e {
        E::Domain(_) | E::ArchitectureMismatch(_) => 2,
        E::Format(_) | E::Io(_) => 3,
        E::Sink { source, .. } => core_code(source),
        E::Numerical(_)
        | E::FrozenObservable(_)
        | E::Shape { .. }
        | E::Autodiff(_)
        | E::NonFinite { .. }
        | E::Integration { .. } => 4,
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(lflow::Error::Io(e))
    }
}
