//! TAP/AMP iteration for the Sherrington–Kirkpatrick spin glass.
//!
//! The crate is organised bottom-up:
//!
//! * [`disorder`] samples and stores the symmetric Gaussian coupling matrix.
//! * [`dynamics`] runs the iteration `m ← tanh(h + Y)` with either the
//!   classical finite-size Onsager term or the derivative (re-centering) term.
//! * [`derivatives`] propagates the first derivatives of every magnetization
//!   with respect to every coupling and evaluates the error functionals `Δ`, `ℰ`.
//! * [`quadrature`] and [`limit`] hold the deterministic large-`N` theory:
//!   `φ`, `χ`, `ψ`, the fixed points `q` and `q̃`, the AT residual and the
//!   covariance (state-evolution) table.
//! * [`ensemble`] runs disorder ensembles and compares them with the limit.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod derivatives;
pub mod disorder;
pub mod dynamics;
pub mod ensemble;
mod error;
pub mod limit;
pub mod quadrature;
pub mod stats;
mod summation;

pub use derivatives::{DerivativeTensor, PairSet, TangentWindow};
pub use disorder::DisorderMatrix;
pub use dynamics::{IterationState, ModelParams, OnsagerChoice};
pub use ensemble::EnsembleConfig;
pub use error::{Error, Result};
pub use limit::{CovariancePropagation, LimitSolution};
pub use quadrature::QuadratureRule;
pub use summation::pairwise_sum;
