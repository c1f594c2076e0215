use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("flip probability {p} exceeds the configured bound alpha = {cap}")]
    AlphaBound { p: f64, cap: f64 },

    #[error("residual coupling probability {value} outside [0, 1]; nu = {nu} is too small for the realized rate ratio")]
    NuViolation { value: f64, nu: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state space too large: N = {n} exceeds the enumeration cap of {cap}")]
    Capacity { n: usize, cap: usize },

    #[error("disconnected system: {0}")]
    Connectivity(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("landscape ordering: F(z*) = {saddle} is not above F(m*) = {minimum}")]
    LandscapeOrdering { saddle: f64, minimum: f64 },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),
}

impl Error {
    /// True for failures caused by user-supplied parameters rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::AlphaBound { .. } | Error::Capacity { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
