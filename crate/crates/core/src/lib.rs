//! Monte Carlo laboratory and bound calculator for the anti-concentration of
//! `M_B − M_A`, the difference between the maxima of two blocks of a
//! Gaussian vector.

pub mod bootstrap;
pub mod bounds;
pub mod design;
pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod levy;
pub mod report;
pub mod rng;
pub mod sampler;

pub use error::{Block, Error, Reason, Result};
pub use gaussian::{CovForm, CovSpec, Partition};
