use std::path::PathBuf;

use thiserror::Error;

use crate::truth::SwitchConfig;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("branch {from}-{to} closes a cycle")]
    CycleDetected { from: String, to: String },

    #[error("node {0} is not connected to the reference bus")]
    Disconnected(String),

    #[error("branch {from}-{to} has negative impedance (r={r}, x={x})")]
    NegativeImpedance { from: String, to: String, r: f64, x: f64 },

    #[error("invalid voltage band: v_min={v_min}, v_max={v_max}")]
    InvalidBand { v_min: f64, v_max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },

    #[error("need at least 2 samples per node, found {0}")]
    InsufficientSamples(usize),

    #[error("node set mismatch: {0}")]
    MismatchedNodes(String),

    #[error("unknown node id {0}")]
    UnknownNode(String),

    #[error("negative voltage variance {value} at node index {node}")]
    NegativeVariance { node: usize, value: f64 },

    #[error("fixed-point iteration did not converge after {} iterations (residual {})", best.iterations, best.residual)]
    NonConvergence { best: Box<crate::solver::FixedPointSolution> },

    #[error("no consistent switch configuration (visited {} states)", cycle.len())]
    NoConsistentConfiguration { cycle: Vec<SwitchConfig> },

    #[error("{switched} switched nodes exceed the exhaustive search limit of {limit}")]
    ExhaustiveLimitExceeded { switched: usize, limit: usize },

    #[error("at time {time}: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("model has no switched nodes")]
    NoSwitchedNodes,

    #[error("empty window")]
    EmptyWindow,

    #[error("no equilibrium converged from {starts} starts")]
    NoEquilibrium { starts: usize },

    #[error("no feasible reference voltage: {summary}")]
    EmptyFeasibleSet { summary: String },
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }

    /// Strips `AtTime` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            other => other,
        }
    }
}
