//! Quasi-stationary distributions and Yaglom limits of absorbed Markov processes.
//!
//! The crate covers killed finite chains (exact spectral solves), birth-death
//! chains on the positive integers (series tests, orthogonal-polynomial
//! machinery, truncation), Galton-Watson processes, one-dimensional and
//! multi-type diffusions, and the Fleming-Viot particle approximation.

pub mod birth_death;
pub mod branching;
pub mod diffusion;
pub mod error;
pub mod finite_qsd;
pub mod fleming_viot;
mod linalg;
pub mod prob;
mod quad;
pub mod rng;

pub use error::{QsdError, Result};
pub use prob::ProbVector;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
