use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("coefficient error: {0}")]
    Coefficient(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver did not converge: {message} (relative residual {residual:.3e} after {iterations} iterations)")]
    Solver {
        message: String,
        residual: f64,
        iterations: usize,
    },

    /// Newton failure on a single implicit step, after all dt halvings.
    #[error("time step failed at t = {time}: {message}; try a smaller dt")]
    Step { time: f64, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Geometry(_)
            | Error::Resolution(_)
            | Error::Coefficient(_)
            | Error::Parameter(_)
            | Error::Input(_)
            | Error::Config(_) => 2,
            Error::Solver { .. } | Error::Step { .. } | Error::Internal(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}
