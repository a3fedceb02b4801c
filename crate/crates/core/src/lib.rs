//! Neural cardiac motion fields.
//!
//! A coordinate network maps a space-time query `(X, t)` to an intensity and
//! a pair of forward/backward displacement vectors. The network is fitted per
//! sequence with self-supervised consistency losses and then queried for
//! point tracking, volume warping and Lagrangian strain.

pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod parallel;
pub mod real;
pub mod strain;
pub mod tracking;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
pub use real::Real;
