//! Dense row-major matrices, seeded initialization and the scalar trait every
//! other module is generic over.

pub(crate) mod matrix;
mod real;
mod rng;

pub use matrix::{Matrix, TokenMatrix};
pub use real::Real;
pub use rng::SeededRng;
