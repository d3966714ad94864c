//! Deterministic solver for mass-conserving kinetic systems whose transition
//! kernels are Dirac deltas of a bilinear transition map.
//!
//! The central object is a [`system::KineticSystem`]: a set of functional
//! subsystems with densities over real microstate intervals, coupled by
//! pairwise interaction rules. Each rule carries a transition function
//! `phi(x, y)` that relocates the interacting agent, together with an
//! encounter rate. The library provides
//!
//! - a collocation solver ([`solver`]) on first-kind Chebyshev nodes whose
//!   loss term is rescaled each evaluation so the discrete mass functional is
//!   conserved exactly (plus the uncorrected variant for comparison),
//! - the coefficient-tensor precomputation ([`tensor`]) that reduces the
//!   delta-kernel double integrals to one-dimensional path integrals with a
//!   persistent on-disk cache ([`cache`]),
//! - binned agent-based reference simulators ([`stochastic`]): tau-leaping
//!   and a threshold-switched hybrid, with deterministic seeded ensembles,
//! - the convergence / difference / moment instruments ([`metrics`]) used to
//!   compare all of the above.

pub mod basis;
pub mod cache;
pub mod error;
pub mod metrics;
pub mod solver;
pub mod stochastic;
pub mod system;
pub mod tensor;

pub use error::{KinError, Result};
