use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("field mean {mean:.6e} differs from the configured mean {expected:.6e}; the Neumann problem has no solution")]
    IncompatibleMean { mean: f64, expected: f64 },

    #[error("implicit block for mode ({kx}, {ky}) is singular; reduce the time step")]
    SingularMode { kx: usize, ky: usize },

    #[error("Krylov solver stopped after {iterations} iterations at relative residual {residual:.3e}")]
    KrylovStalled { iterations: usize, residual: f64 },

    #[error("electric potential solve stopped after {iterations} sweeps at relative residual {residual:.3e}")]
    PotentialStalled { iterations: usize, residual: f64 },

    #[error("dielectric coefficient eps0 + eps1*phi reached {min:.3e}; it must stay positive")]
    NonPositiveDielectric { min: f64 },

    #[error("Newton iteration for the supplementary variable failed after {iterations} iterations (beta = {beta:.3e}, residual = {residual:.3e}); try a smaller time step")]
    NewtonDiverged {
        iterations: usize,
        beta: f64,
        residual: f64,
    },

    #[error("supplementary direction is zero but the energy residual is {residual:.3e}; no root exists")]
    NoRoot { residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("snapshot format error in {path}: {reason}")]
    Snapshot { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
