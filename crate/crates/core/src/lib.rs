//! Numerical laboratory for finite-state mean field games: master equations
//! under common and idiosyncratic jump noise, their characteristics and
//! monotonicity certificates, and one-dimensional MFG systems on the torus.

pub mod characteristics;
pub mod cli;
pub mod error;
pub mod fields;
pub mod linalg;
pub mod master_eq;
pub mod mfg_pde;
pub mod monotonicity;
pub mod rng;

pub use error::{Error, Result};
