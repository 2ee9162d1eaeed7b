use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no sign change on bracket [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("bisection did not converge after {iterations} iterations (width {width})")]
    Convergence { iterations: usize, width: f64 },

    #[error("missing column `{column}` (looked for: {candidates})")]
    Schema { column: String, candidates: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("selection is empty: {0}")]
    EmptySelection(String),

    #[error("correlation undefined: `{0}` is constant on the selection")]
    UndefinedCorrelation(String),

    #[error("overflow evaluating record {record} (value {value})")]
    Overflow { record: usize, value: f64 },

    #[error("risk aversion {alpha} too large: exp(alpha * max loss) overflows; admissible alpha <= {max_alpha}")]
    AlphaTooLarge { alpha: f64, max_alpha: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no root: {0}")]
    NoRoot(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate demand: aversion mass on (0, {bound}] is zero")]
    DegenerateDemand { bound: f64 },

    #[error("index set is empty (p_e = 0) at e = {e}")]
    EmptyIndexSet { e: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
