use alloc::string::String;
use core::fmt;

/// Error type shared by every module in the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum MalError {
    /// Invalid configuration; names the offending field.
    Config(String),
    /// Tensor shape mismatch; names both shapes.
    Shape(String),
    /// Out-of-range id (embedding lookup, class index).
    Index(String),
    /// Argument outside its mathematical domain.
    Domain(String),
    /// NaN/Inf encountered during numeric computation.
    Numeric(String),
    /// Input data violates a structural invariant.
    Data(String),
    /// Input degenerate for the requested computation (e.g. one-class fit).
    Degenerate(String),
    /// Exact-enumeration capacity exceeded.
    Capacity(String),
    /// Metric undefined on the given input.
    UndefinedMetric(String),
    /// Malformed or non-differentiable computation graph.
    Graph(String),
}

impl fmt::Display for MalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalError::Config(m) => write!(f, "configuration error: {m}"),
            MalError::Shape(m) => write!(f, "shape error: {m}"),
            MalError::Index(m) => write!(f, "index error: {m}"),
            MalError::Domain(m) => write!(f, "domain error: {m}"),
            MalError::Numeric(m) => write!(f, "numeric error: {m}"),
            MalError::Data(m) => write!(f, "data error: {m}"),
            MalError::Degenerate(m) => write!(f, "degenerate data: {m}"),
            MalError::Capacity(m) => write!(f, "capacity error: {m}"),
            MalError::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            MalError::Graph(m) => write!(f, "graph error: {m}"),
        }
    }
}

impl core::error::Error for MalError {}
