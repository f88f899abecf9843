use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations, configuration validation and training.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error(
        "training diverged at iteration {iteration}: loss={loss} loss_sim={loss_sim} loss_reg={loss_reg} ({reason})"
    )]
    Divergence {
        iteration: u64,
        loss: f64,
        loss_sim: f64,
        loss_reg: f64,
        reason: String,
    },
    #[error("synthetic pair generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
