//! Unsupervised atlas-based registration: a two-stage (affine + dense
//! nonrigid) registration model trained with a masked-similarity +
//! regularization objective, plus synthetic ground-truth benchmarks and a
//! landmark-based target registration error harness.

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod nd;
pub mod network;
pub mod synthgen;
pub mod tape;

pub use error::{Error, Result};
