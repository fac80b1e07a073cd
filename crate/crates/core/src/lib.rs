//! Laboratory for tagged-particle zero-range dynamics on periodic lattices.
//!
//! The crate is organized around the pipeline an experiment follows:
//!
//! * [`rate_expr`] — a small expression language for occupancy rates `g(k)`,
//!   so models are config-driven rather than recompiled.
//! * [`model`] — validated domain types: rate functions, jump kernels,
//!   lattices, occupancy configurations, and the elementary configuration
//!   transformations (particle moves and frame shifts).
//! * [`equilibrium`] — exact normalizers, densities, and inverse-CDF samplers
//!   for the product equilibrium measures and their origin-modified variants.
//! * [`sim`] — event-driven simulation of the environment seen from the
//!   tagged particle, with exact compensator accounting.
//! * [`coupling`] — the monotone two-system coupling (d = 1, totally
//!   asymmetric) that keeps the lighter system's tagged particle ahead.
//! * [`estimators`] — mergeable ensemble statistics and the statistical
//!   gates built on them (drift, variance bounds, superadditivity,
//!   association, CLT, adjoint identities).
//! * [`spectral`] — exact finite-state generators, spectral gaps, resolvent
//!   norms, and additive-functional variances.
//! * [`stats`] — shared test statistics (Kolmogorov–Smirnov, chi-square,
//!   jackknife helpers).

pub mod coupling;
pub mod equilibrium;
pub mod estimators;
pub mod model;
pub mod rate_expr;
pub mod sim;
pub mod spectral;
pub mod stats;
pub mod weights;

pub use model::{Configuration, JumpKernel, RateFunction, Torus};
