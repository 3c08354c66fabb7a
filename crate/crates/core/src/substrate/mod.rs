//! Dense and sparse linear algebra, seeded randomness, learnable parameters,
//! reverse-mode gradients and the Adam optimizer.

pub mod dense;
pub mod gradcheck;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod sparse;
pub mod tape;

pub use dense::{dot, Dense, DenseMatrix};
pub use gradcheck::{grad_check, GradCheckReport};
pub use param::{xavier_init, AdamConfig, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use scalar::{sigmoid, softplus, Scalar};
pub use sparse::{Csr, DegreeMode, SparseMatrix};
pub use tape::{Gradients, Tape, Var};
