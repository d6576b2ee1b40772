use std::fmt;

/// Which part of an edit run produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Inversion,
    Sampling,
    Reconstruction,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Inversion => "inversion",
            Phase::Sampling => "sampling",
            Phase::Reconstruction => "reconstruction",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    Dimension(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("empty token selection")]
    EmptySelection,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{name} = {value} is outside {expected}")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("kv cache miss at step {step}, layer {layer}")]
    CacheMiss { step: usize, layer: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("divergence during {phase} at step {step}: {reason}")]
    Divergence {
        phase: Phase,
        step: usize,
        reason: String,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Re-tag a divergence raised by a solver with the pipeline phase it happened in.
    pub fn in_phase(self, phase: Phase) -> Self {
        match self {
            Error::Divergence { step, reason, .. } => Error::Divergence {
                phase,
                step,
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value,
            expected: "[0, 1]",
        })
    }
}
