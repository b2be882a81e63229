//! Error types shared across the crate.

use crate::adapter::SiteId;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Growing a site would exceed its rank cap min(n, d).
    #[error("rank capacity exceeded at site {site}: requested rank {requested} > cap {cap}")]
    Capacity {
        site: SiteId,
        requested: usize,
        cap: usize,
    },

    /// The growth schedule was driven outside its contract
    /// (warm-up violation, exhausted budget, empty score board, ...).
    #[error("schedule error: {0}")]
    Schedule(String),

    /// A non-finite value appeared during training.
    #[error("numerical failure at step {step}{}", match site { Some(s) => format!(" (first non-finite output at site {s})"), None => String::new() })]
    Numerical { step: usize, site: Option<SiteId> },

    /// A config or record file violates its schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }
}
