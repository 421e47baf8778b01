use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {axis} mismatch (expected {expected}, found {found})")]
    ShapeMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: input too small ({reason})")]
    TooSmall { op: &'static str, reason: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: mask selects no pixels")]
    EmptyMask { op: &'static str },

    #[error("{op}: empty sequence")]
    EmptySequence { op: &'static str },

    #[error("objective returned a non-finite value after {} evaluations", trace.len())]
    ObjectiveNotFinite { trace: Vec<f64> },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(
    op: &'static str,
    axis: &'static str,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            found,
        })
    }
}
