use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the estimation pipeline.
///
/// [`Error::is_usage`] separates caller mistakes (bad arguments, unreadable
/// files) from data and model failures; the CLI maps the two groups onto
/// different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("all markers are monomorphic")]
    AllMonomorphic,

    #[error("degenerate kinship: tr(PKP) = {0:e}")]
    DegenerateKinship(f64),

    #[error("missing values in {what}: first at row {row}, column {column}")]
    MissingValues {
        what: String,
        row: usize,
        column: usize,
    },

    #[error("not estimable: {0}")]
    NotEstimable(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("REML did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("accession `{0}` is missing from the kinship matrix")]
    MissingAccession(String),

    #[error("QTL sampling failed after {attempts} attempts (le_ratio = {le_ratio})")]
    QtlSampling { attempts: usize, le_ratio: f64 },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by how the tool was invoked rather than by the data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Io(_))
    }

    /// Stable short name for machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Dimension(_) => "dimension",
            Error::AllMonomorphic => "all_monomorphic",
            Error::DegenerateKinship(_) => "degenerate_kinship",
            Error::MissingValues { .. } => "missing_values",
            Error::NotEstimable(_) => "not_estimable",
            Error::Singular(_) => "singular",
            Error::NoConvergence(_) => "no_convergence",
            Error::MissingAccession(_) => "missing_accession",
            Error::QtlSampling { .. } => "qtl_sampling",
            Error::NotApplicable(_) => "not_applicable",
            Error::Degenerate(_) => "degenerate",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
