//! Sticky M-adic tree constructions of Kakeya-type tube sets over finite
//! direction sets, together with exact probability, percolation and counting
//! checks and an experiment harness.

pub mod counting;
pub mod error;
pub mod harness;
pub mod lacunarity;
pub mod madic_tree;
pub mod percolation;
pub mod pruning;
pub mod scalar;
pub mod sticky;
pub mod tubes;

pub use error::{Error, Result};
pub use madic_tree::{encode_set, Cube, Grid, MadicTree};
pub use scalar::Scalar;

/// Exact rational scalar.
pub type Exact = num_rational::BigRational;
/// Floating-point scalar for Monte Carlo and quadrature.
pub type Real = f64;
