use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants split into two families: input problems (bad files, bad
/// arguments, violated preconditions) and numerical failures (a solver that
/// did not converge or a problem that is not identifiable). The CLI maps the
/// first family to exit status 1 and the second to exit status 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing required metadata key `{key}`")]
    MissingMetadata { key: String, line: usize },

    #[error("line {line}: frequency grid is not strictly increasing")]
    NonMonotoneGrid { line: usize },

    #[error("line {line}: signal {signal} disagrees with (n_f - n_b)/n_b = {expected}")]
    InconsistentSignal {
        line: usize,
        signal: f64,
        expected: f64,
    },

    #[error("no convergence after {iterations} iterations (cost {cost:.6e})")]
    NoConvergence {
        iterations: usize,
        cost: f64,
        last: Vec<f64>,
    },

    #[error("unidentifiable parameters: {}", .0.join(", "))]
    Unidentifiable(Vec<String>),

    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for solver-side failures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::Unidentifiable(_) | Error::Numerical(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse { .. } => "parse",
            Error::MissingMetadata { .. } => "missing_metadata",
            Error::NonMonotoneGrid { .. } => "non_monotone_grid",
            Error::InconsistentSignal { .. } => "inconsistent_signal",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Unidentifiable(_) => "unidentifiable",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
