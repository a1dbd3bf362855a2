//! Stochastic Lagrangian flows on the flat torus `T² = (R/2πZ)²`.
//!
//! The crate builds every numerical ingredient needed to study generalized
//! Navier–Stokes flows at desk scale:
//!
//! * [`spectral`]: exact calculus of real trigonometric polynomials and the
//!   divergence-free noise basis `A_k = (k₂,−k₁) cos k·θ`, `B_k = (k₂,−k₁) sin k·θ`.
//! * [`drift`]: piecewise-constant-in-time spectral drifts, Leray projection,
//!   heat-semigroup and time mollification, exact kinetic energy.
//! * [`flow`]: Euler–Maruyama ensembles `dg = σ(g) dW + b dt` with counter-based
//!   noise shared by all particles of a replica.
//! * [`transport`]: the transport `Θ_t(φ,ψ) = ∫ φ(x) ψ(g_t(x)) dx`, its drift,
//!   brackets and the generalized-flow axiom checks.
//! * [`energy`]: the flow energy and lower bounds of the generalized energy
//!   through partitions of unity and the flat isometric embedding.
//! * [`variational`]: minimization under a prescribed final configuration,
//!   flows with prescribed rough drift and randomized mixtures.
//! * [`decomposition`]: factorization `g = g̃ ∘ ψ` into a martingale flow and a
//!   finite-variation flow driven by the pulled-back drift.
//!
//! The crate is `no_std` and only needs `alloc`. Loops over independent
//! replicas go through [`runner::ReplicaRunner`] so that a caller with threads
//! can parallelize them without changing any result.

#![no_std]

extern crate alloc;

pub mod decomposition;
pub mod drift;
pub mod energy;
pub mod error;
pub mod flow;
pub mod rng;
pub mod runner;
pub mod spectral;
pub mod stats;
pub mod transport;
pub mod variational;

pub use error::{Error, Result};

// When std is anywhere in the dependency graph its inherent float methods
// shadow this trait, so modules import it with `allow(unused_imports)`.
pub(crate) use num_traits::Float;

/// `2π`, the period of each torus coordinate.
pub const TAU: f64 = core::f64::consts::TAU;
