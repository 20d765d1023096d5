use thiserror::Error;

/// Errors raised by the solvers and constructors in this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("axis {axis}: {reason}")]
    DegenerateAxis { axis: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grids do not match")]
    GridMismatch,

    #[error(
        "CFL violation: dt = {dt:.3e} exceeds limit {limit:.3e} (max drift {max_drift:.3e}, rate terms {rate:.3e})"
    )]
    Cfl {
        dt: f64,
        limit: f64,
        max_drift: f64,
        rate: f64,
    },

    #[error("non-finite value at t = {time}")]
    NonFinite { time: f64 },

    #[error("blow-up at t = {time}: |U| = {value:.3e} exceeds cap {cap:.3e}")]
    BlowUp { time: f64, value: f64, cap: f64 },

    #[error("jump matrix is singular (condition number {condition:.3e}); backward pinning needs an invertible S")]
    SingularJump { condition: f64 },

    #[error("negative density {value:.3e} at t = {time}, node {node}")]
    NegativeDensity { time: f64, node: usize, value: f64 },

    #[error("effective diffusion {value:.3e} < 0 at x = {x}, m = {m}")]
    EffectiveDiffusion { x: f64, m: f64, value: f64 },

    #[error("coupling certificate rejected: {0}")]
    Certificate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
