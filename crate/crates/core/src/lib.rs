//! Constraint-preconditioned Krylov solvers for regularized saddle-point
//! systems
//!
//! ```text
//! [ A  Bᵀ ] [x]   [b1]
//! [ B  -C ] [y] = [b2]
//! ```
//!
//! preconditioned by `P = [[G, Bᵀ], [B, -C]]`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity, clippy::too_many_arguments)]

pub mod error;
pub mod factor;
pub mod linops;
pub mod oracle;
pub mod problems;
pub mod processes;
pub mod saddle;
pub mod solvers;
pub mod vecops;

pub use error::{Error, Result};
pub use factor::{Factorization, Inertia};
pub use linops::{LinearOperator, MatrixStorage, Symmetry};
