use thiserror::Error;

/// Pipeline stage that raised an error. Used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Io,
    Simulate,
    Calibrate,
    DelayProfile,
    Extract,
    Features,
    Classify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Io => "io",
            Stage::Simulate => "simulate",
            Stage::Calibrate => "calibrate",
            Stage::DelayProfile => "pdp",
            Stage::Extract => "extract",
            Stage::Features => "features",
            Stage::Classify => "classify",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid channel plan: {0}")]
    Plan(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("no direct path detected")]
    NoDirectPath,
    #[error("feature extraction failed: {0}")]
    Features(String),
    #[error("classification failed: {0}")]
    Classify(String),
    #[error("container format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn stage(&self) -> Stage {
        match self {
            Error::Domain(_) | Error::Plan(_) => Stage::Simulate,
            Error::Config(_) => Stage::Config,
            Error::Calibration(_) => Stage::Calibrate,
            Error::Solver(_) => Stage::DelayProfile,
            Error::NoDirectPath => Stage::Extract,
            Error::Features(_) => Stage::Features,
            Error::Classify(_) => Stage::Classify,
            Error::Format(_) | Error::Io(_) => Stage::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
