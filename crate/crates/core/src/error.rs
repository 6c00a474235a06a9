use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("agent {agent} chose action {action}{}, but only {limit} actions exist", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    InvalidAction {
        agent: usize,
        step: Option<usize>,
        action: usize,
        limit: usize,
    },

    #[error("joint action has {got} entries, expected {expected}")]
    JointActionLength { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("support violation at state {state}, joint action {joint_action:?}: {reason}")]
    SupportViolation {
        state: usize,
        joint_action: Vec<usize>,
        reason: String,
    },

    #[error("value iteration did not converge within {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}, agent {agent}: {reason}")]
    Diverged {
        epoch: usize,
        agent: usize,
        reason: String,
    },

    #[error("degenerate samples: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for faults raised by numerical guards (NaN losses, divergence, non-convergence).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Diverged { .. }
                | Error::NonConvergence { .. }
                | Error::Singular(_)
        )
    }
}
