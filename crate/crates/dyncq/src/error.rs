use thiserror::Error;

/// Crate-wide error type. CLI exit codes: input/format errors map to 2,
/// resource guards to 3, oracle mismatches to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("unknown variable {0}")]
    UnknownVariable(String),

    #[error("unknown relation {0}")]
    UnknownRelation(String),

    #[error("arity mismatch for {relation}: expected {expected}, got {got}")]
    ArityMismatch { relation: String, expected: usize, got: usize },

    #[error("variable order search guard exceeded: component has {vars} variables (limit {limit})")]
    SearchGuard { vars: usize, limit: usize },

    #[error("query fracture is not hierarchical")]
    NotHierarchical,

    #[error("operation requires a canonical variable order")]
    NotCanonical,

    #[error("probabilistic mode requires a CQAP0 query")]
    NotCqap0,

    #[error("probabilistic mode forbids repeated relation symbols")]
    RepeatedSymbols,

    #[error("iterator is stale: an update occurred after it was opened")]
    StaleIterator,

    #[error("access request must bind exactly the input variables; {0}")]
    BadRequest(String),

    #[error("possible-worlds limit exceeded: {tuples} uncertain tuples (limit {limit})")]
    WorldLimit { tuples: usize, limit: usize },

    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),

    #[error("input format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
