use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, lengths or dimensions do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numeric error at particle {index}: {what}")]
    Numeric { index: usize, what: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("singular pair ({0}, {1}): coincident particles with a non-integrable kernel")]
    SingularPair(usize, usize),

    #[error("equilibrium not found: {0}")]
    EquilibriumNotFound(String),

    #[error("generation error at step {step}, particle {index}: non-finite state")]
    Generation { step: usize, index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted at global step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    /// Wraps an inner error with the trajectory/step it came from.
    #[error("trajectory {traj}, step {step}: {source}")]
    At {
        traj: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(index: usize, what: impl Into<String>) -> Self {
        Error::Numeric {
            index,
            what: what.into(),
        }
    }

    pub fn at(self, traj: usize, step: usize) -> Self {
        Error::At {
            traj,
            step,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::At { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
