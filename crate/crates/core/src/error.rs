use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate site {site}: {reason}")]
    DegenerateSite { site: u64, reason: String },

    #[error("site {site} has {count} exceedances, at least {min} required")]
    TooFewExceedances { site: u64, count: usize, min: usize },

    #[error("optimizer failed to converge: {0}")]
    ConvergenceFailure(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{} site(s) outside the mesh hull: {sites:?}", sites.len())]
    OutOfHull { sites: Vec<usize> },

    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("every site failed to fit ({0} sites)")]
    AllSitesFailed(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure(_) | Error::NotPositiveDefinite(_) | Error::AllSitesFailed(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
