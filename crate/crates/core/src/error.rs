use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical procedure failed (non-convergence, overflow, NaN loss, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A series has zero variance, so autocorrelation is undefined.
    #[error("frozen observable: {0}")]
    FrozenObservable(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("autodiff: {0}")]
    Autodiff(String),

    /// `node` is the tape position of the offending operation.
    #[error("non-finite value encountered in `{op}` (tape node {node}) during backward pass")]
    NonFinite { op: &'static str, node: usize },

    #[error("leapfrog produced a non-finite force at step {step}")]
    Integration { step: usize },

    #[error("record sink failed at trajectory {traj}: {source}")]
    Sink {
        traj: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("architecture mismatch: {}", .0.join("; "))]
    ArchitectureMismatch(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
