//! Numerical laboratory for the spectral asymptotics of one-dimensional
//! Schrödinger operators `-y'' + (U + V) y = lambda y` with slowly decaying
//! perturbations: eigenfunction integration, WKB comparison, the (I+Q)
//! transformation chain, q-iteration, dyadic mass decompositions, and
//! multilinear transform probes.
//!
//! The numerical core is generic over the floating point scalar through
//! [`scalar::Real`]; `f64` aliases are exported at the crate root.

pub mod basis;
pub mod dyadic;
pub mod error;
pub mod multilinear;
pub mod ode;
pub mod potential;
pub mod qiter;
pub mod quad;
pub mod scalar;
pub mod schrod;
pub mod step_fn;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Real;

/// Working-precision aliases.
pub type Potential64 = potential::PotentialSpec<f64>;
pub type Weight64 = potential::WeightSpec<f64>;
pub type Step64 = step_fn::StepFunction<f64>;
