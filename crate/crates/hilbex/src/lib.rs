//! Order-by-order construction and verification of the multiscale Hilbert
//! expansion (interior, viscous layer, Knudsen layer) of the scaled
//! Boltzmann equation in a half-space with specular reflection.

// `!(x > 0.0)` style guards are meant to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli_io;
pub mod collision;
pub mod error;
pub mod euler;
pub mod expansion;
pub mod interior;
pub mod knudsen;
pub mod layer;
pub mod quad;
pub mod velocity;

pub use error::{HilbexError, Result};
