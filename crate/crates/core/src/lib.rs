//! Teacher-student dynamics of softmax classifiers: low-rank teachers, deep
//! linear students trained by full-batch gradient descent, the
//! training-aligned singular-value ODEs, and the multitask benefit with its
//! analytic bounds.

pub mod benefit;
pub mod error;
pub mod gmatrix;
pub mod linalg;
pub mod student;
pub mod tadynamics;
pub mod teacher;

pub use error::{Error, Result};
pub use linalg::{Matrix, RngSeed, SvdTriple};
