//! Library side of the `geopretrain` command: configuration, run manifests,
//! dataset wiring and the command implementations.

pub mod commands;
pub mod config;
pub mod inputs;
pub mod manifest;
pub mod names;
pub mod report;

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or missing inputs, found before any work starts.
    Validation(anyhow::Error),
    /// Anything that goes wrong while running.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "invalid: {e:#}"),
            Failure::Runtime(e) => write!(f, "failed: {e:#}"),
        }
    }
}

impl From<geopretrain_nn::Error> for Failure {
    fn from(e: geopretrain_nn::Error) -> Self {
        match e {
            geopretrain_nn::Error::Config(_) | geopretrain_nn::Error::BackendMissing { .. } => {
                Failure::Validation(e.into())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<geopretrain_core::Error> for Failure {
    fn from(e: geopretrain_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<geopretrain_core::checkpoint::CheckpointError> for Failure {
    fn from(e: geopretrain_core::checkpoint::CheckpointError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;
