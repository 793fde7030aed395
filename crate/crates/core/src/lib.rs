//! Simulation laboratory for a discrete weakly self-avoiding moving polymer.
//!
//! The polymer is a chain of `J` monomers whose heights `u(t, n)` follow the
//! discrete stochastic heat equation with Neumann (reflecting) ends. On top of
//! the free Gaussian dynamics the crate builds the self-repelling Gibbs measure
//! by Boltzmann reweighting of approximate self-intersection counts, and ships
//! the numerical machinery used to check spectral identities, increment
//! variance scaling, partition-function bounds and radius-of-gyration scaling.
//!
//! Module map:
//!
//! * [`spectral`]: cosine eigenbasis of the Neumann averaging semigroup,
//!   Green's functions and the transition-matrix oracle.
//! * [`dynamics`]: noise fields, the forward recursion, the closed-form
//!   solution and the stationary pinned string.
//! * [`observables`]: center of mass, radius of gyration, self-intersection
//!   counts and occupancy histograms.
//! * [`gibbs`]: Boltzmann weights, importance sampling and Metropolis sampling
//!   of the polymer measure, tilted measures and the Jensen bound.
//! * [`increments`]: closed-form stationary increment variances.
//! * [`ar1`]: per-mode AR(1) decomposition and large-deviation rate functions.
//! * [`experiments`]: seeded study drivers and the validation suite.

pub mod ar1;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod increments;
pub mod observables;
pub mod report;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use dynamics::{NoiseField, PinnedString, PolymerModel, Trajectory};
pub use error::{Error, Result};
pub use spectral::{Convention, SpectralBasis};
