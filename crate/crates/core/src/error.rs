use alloc::string::String;
use core::fmt;

use crate::volume::Dims;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two volumes (or a volume and an operator) disagree on grid dimensions.
    Shape {
        expected: Dims,
        found: Dims,
    },
    InvalidParameter(String),
    /// A public operation produced NaN or infinity.
    NonFinite(&'static str),
    /// A solver state norm exceeded the divergence guard.
    Divergence {
        solver: &'static str,
        step: usize,
        norm: f64,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { expected, found } => write!(
                f,
                "shape mismatch: expected {}x{}x{}, found {}x{}x{}",
                expected[0], expected[1], expected[2], found[0], found[1], found[2]
            ),
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite values in {what}"),
            Error::Divergence { solver, step, norm } => {
                write!(f, "{solver} diverged at step {step} (state norm {norm:.3e})")
            }
        }
    }
}

impl core::error::Error for Error {}
