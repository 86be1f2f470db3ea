//! GSB-MDPO: on-policy mirror descent over the path measures of multi-step
//! stochastic generative policies, plus a Gaussian PPO baseline, analytic
//! verifiers and a 2-D tilting toy.

pub mod baseline;
pub mod config;
pub mod critic;
pub mod envs;
pub mod genpolicy;
pub mod oracles;
pub mod pathobj;
pub mod rng;
pub mod toylab;
pub mod trainer;

pub use diffcore;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("{what} out of range: {value}")]
    OutOfRange { what: String, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn range(what: impl Into<String>, value: f64) -> Self {
        Error::OutOfRange {
            what: what.into(),
            value,
        }
    }

    pub(crate) fn len(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::LengthMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
