//! Approximate large square matrices as products of Chord-structured
//! sparse full-rank factors, benchmark against truncated SVD at an equal
//! non-zero budget, and train a sparse-factorization attention block on
//! long synthetic sequences.

pub mod chord;
pub mod data;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod psf;
pub mod solver;
pub mod storage;
pub mod tsvd;

pub use error::{Result, SfError};
