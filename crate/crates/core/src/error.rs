//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by ingestion, estimation, and scoring operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate (respondent, item) pair ({respondent}, {item}) at line {line}")]
    DuplicateKey {
        respondent: String,
        item: String,
        line: usize,
    },

    #[error("unknown label {label:?} at line {line} (vocabulary: {vocabulary:?})")]
    UnknownLabel {
        label: String,
        line: usize,
        vocabulary: Vec<String>,
    },

    #[error("item {item:?} has no gold-key entry")]
    MissingKeyEntry { item: String },

    #[error("table has no responses")]
    EmptyTable,

    #[error("per-item response counts differ (min {min}, max {max}); downsample or balance the table")]
    UnequalResponseCounts { min: usize, max: usize },

    #[error("agreement is degenerate: expected agreement is 1 while observed is {observed}")]
    DegenerateAgreement { observed: f64 },

    #[error("2x2 table has a zero margin; correlation is undefined")]
    DegenerateMargin,

    #[error("matrix contains undefined or non-finite entries; drop flagged items first")]
    NonFiniteMatrix,

    #[error("rotation did not converge after {iterations} iterations (gradient norm {residual:e})")]
    RotationNonConvergence { iterations: usize, residual: f64 },

    #[error("constant items (all observed responses identical): {items:?}")]
    ConstantItems { items: Vec<String> },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fits were computed on different data ({0})")]
    MismatchedData(String),

    #[error("fewer than 3 usable score groups ({usable}) after merging")]
    InsufficientBins { usable: usize },

    #[error("items ({item_a}, {item_b}) jointly observed by only {n} respondents (need {need})")]
    InsufficientJointObservations {
        item_a: String,
        item_b: String,
        n: usize,
        need: usize,
    },

    #[error("unknown item id {id:?}")]
    UnknownItem { id: String },

    #[error("too few items: have {have}, need at least {need}")]
    TooFewItems { have: usize, need: usize },

    #[error("no model could be fit to this item set: {attempts:?}")]
    Uncalibratable { attempts: Vec<String> },

    #[error("response pattern contains no gradable scale items")]
    EmptyPattern,

    #[error("system response file shares no items with the scale")]
    NoOverlap,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
