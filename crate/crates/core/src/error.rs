use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("{what} = {value} is outside the valid domain {domain}")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("degenerate Stokes image: s0 vanishes everywhere")]
    DegenerateStokes,

    #[error("zenith inversion did not converge after {iterations} iterations; last bracket [{lo}, {hi}]")]
    ZenithNonConvergence { iterations: usize, lo: f64, hi: f64 },

    #[error("integration did not converge after {iterations} iterations (relative residual {last:e})")]
    IntegratorNonConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid DoFP mosaic: {0}")]
    Mosaic(String),

    #[error("patch sampling budget exhausted: {accepted}/{requested} patches accepted from {proposals} proposals (acceptance rate {rate:.4})")]
    PatchBudget {
        requested: usize,
        accepted: usize,
        proposals: usize,
        rate: f64,
    },

    #[error("stitch coverage hole: rows {rows:?}, cols {cols:?} are uncovered")]
    CoverageHole {
        rows: (usize, usize),
        cols: (usize, usize),
    },

    #[error("{path}: line {line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Checks that `found` has the `expected` shape.
pub(crate) fn check_dims(
    what: impl Into<String>,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what: what.into(),
            expected,
            found,
        })
    }
}
