use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an operation's arguments was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration (bad experiment config, stream spec, CLI input).
    #[error("config error: {0}")]
    Config(String),

    /// A charge would push the privacy ledger past its cap. The ledger is
    /// left unchanged; the offending totals are carried for diagnostics.
    #[error(
        "budget exceeded by charge '{label}': totals would become \
         (eps={attempted_eps}, delta={attempted_delta}) against cap \
         (eps={cap_eps}, delta={cap_delta})"
    )]
    BudgetExceeded {
        label: String,
        attempted_eps: f64,
        attempted_delta: f64,
        cap_eps: f64,
        cap_delta: f64,
    },

    /// Internal calibration failure (e.g. the noise-scale root search could
    /// not bracket). Signals a bug rather than bad input.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A runtime invariant was violated; surfaced loudly, never swallowed.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Data ingestion failure (missing column, unparseable rows, ...).
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
