use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate snapshot for report date {0}")]
    DuplicateReportDate(NaiveDate),

    #[error("test date {test_date} is not before report date {report_date}")]
    TestDateNotBeforeReport {
        test_date: NaiveDate,
        report_date: NaiveDate,
    },

    #[error("count for {0} has not converged")]
    Unconverged(NaiveDate),

    #[error("reporting rate undefined for {0}: final count is zero")]
    UndefinedRate(NaiveDate),

    #[error("no report for {date} at lag {lag}")]
    MissingReport { date: NaiveDate, lag: u32 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("observation is infeasible under the prior: {0}")]
    InfeasibleObservation(String),

    #[error("sampler initialisation failed: {0}")]
    Initialization(String),

    #[error("degenerate particle state at step {step}: {reason}")]
    Degenerate { step: usize, reason: String },

    #[error("missing posterior for {0}")]
    MissingPosterior(NaiveDate),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::DuplicateReportDate(_) => "duplicate_report_date",
            Error::TestDateNotBeforeReport { .. } => "test_date_not_before_report",
            Error::Unconverged(_) => "unconverged",
            Error::UndefinedRate(_) => "undefined_rate",
            Error::MissingReport { .. } => "missing_report",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Domain(_) => "domain",
            Error::InfeasibleObservation(_) => "infeasible_observation",
            Error::Initialization(_) => "initialization",
            Error::Degenerate { .. } => "degenerate",
            Error::MissingPosterior(_) => "missing_posterior",
            Error::Parse { .. } => "parse",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }
}
