use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dilation factor must be positive, got {0}")]
    NonPositiveDilation(f64),

    #[error("not differentiable at ({0}, {1}, {2})")]
    NotDifferentiable(f64, f64, f64),

    #[error("non-finite value {value} while evaluating {what}")]
    NonFinite { what: String, value: f64 },

    #[error("no analytic sub-gradient available for {0}")]
    NoAnalyticGradient(String),

    #[error("geodesic solver did not converge (residual {residual:e})")]
    SolverNonConvergence { residual: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("missing boundary value for site {0:?}")]
    MissingBoundary(Vec<i64>),

    #[error(
        "truncation box too small: boundary mass fraction {fraction:e} exceeds {tolerance:e} \
         (half-widths {half_widths:?}); enlarge the box"
    )]
    EnlargeBox {
        fraction: f64,
        tolerance: f64,
        half_widths: Vec<f64>,
    },

    #[error("site {site}: {source}")]
    AtSite {
        site: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor over {sites} sites with {entries} entries exceeds the limit {limit}")]
    TooLarge {
        sites: usize,
        entries: usize,
        limit: usize,
    },

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("eigen solver failed: {0}")]
    EigenSolver(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at_site(self, site: usize) -> Self {
        Error::AtSite {
            site,
            source: Box::new(self),
        }
    }

    /// The underlying error without site context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtSite { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors that come from invalid input rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidModel(_)
            | Error::InvalidParameter(_)
            | Error::NonPositiveDilation(_)
            | Error::MissingBoundary(_) => true,
            Error::AtSite { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
