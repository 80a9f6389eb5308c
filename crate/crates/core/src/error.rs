use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid user-supplied data (non-finite values, bad column contents, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration (hyper-parameters out of range, series too short, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (shape mismatch and the like).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical failure that survived the built-in safeguards.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Model fitting diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Simulated process left the representable range.
    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    /// Internal invariant violation; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn with_stage(self, stage: &str) -> Error {
        match self {
            Error::Io(e) => Error::Internal(format!("[{stage}] I/O error: {e}")),
            Error::Csv(e) => Error::Internal(format!("[{stage}] CSV error: {e}")),
            Error::Input(m) => Error::Input(format!("[{stage}] {m}")),
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Contract(m) => Error::Contract(format!("[{stage}] {m}")),
            Error::Numerical(m) => Error::Numerical(format!("[{stage}] {m}")),
            Error::Training(m) => Error::Training(format!("[{stage}] {m}")),
            Error::Simulation(m) => Error::Simulation(format!("[{stage}] {m}")),
            Error::Internal(m) => Error::Internal(format!("[{stage}] {m}")),
        }
    }
}
