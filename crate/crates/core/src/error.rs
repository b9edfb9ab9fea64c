use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("angle `{name}` = {value} outside [{min}, {max}]")]
    AngleOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("integration failure at step {step}: |r| = {norm} exceeds the clip threshold (dt too large?)")]
    IntegrationFailure { step: u64, norm: f64 },

    #[error("generator matrix is singular (marginally stable configuration)")]
    SingularGenerator,

    #[error("steady state {norm} lies outside the Bloch ball")]
    UnphysicalSteadyState { norm: f64 },

    #[error("exponential fit did not converge (rms residual {residual:.3e})")]
    FitFailed { residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
