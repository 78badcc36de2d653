//! Inductive matrix completion with nuclear-norm regularisation.
//!
//! The crate is organised around a [`model::ProblemInstance`]: side
//! information `X`, `Y` together with a core matrix `M*`, so that the target
//! is `R = X M* Yᵀ`. Modules:
//!
//! - [`model`]: side information, instances, observation sampling.
//! - [`xnorms`]: side-information nuclear / spectral norms and the `T` projectors.
//! - [`solvers`]: penalised (FISTA) and equality-constrained (ADMM) estimators.
//! - [`certificates`]: incoherence, the dual certificate and golfing.
//! - [`bounds`]: closed-form sample-complexity and generalisation bounds.
//! - [`synthlab`]: synthetic instances, metrics and sample-size sweeps.
//! - [`io`]: CSV formats for matrices and observations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod bounds;
pub mod certificates;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod solvers;
pub mod synthlab;
pub mod xnorms;

pub use error::{ImcError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use nalgebra::{DMatrix, DVector};
