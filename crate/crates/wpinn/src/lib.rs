//! Adversarial weak-form solver for scalar conservation laws on the unit sphere.
//!
//! The library trains a solution network against an adversarial test-function
//! network so that the trained solution satisfies a family of Kruzkov-type
//! entropy inequalities in weak form. Everything runs on the CPU in `f64` on
//! top of a small tape-based reverse-mode autodiff engine ([`autodiff`]).
//!
//! The main pieces:
//!
//! - [`autodiff`] — computation tape with nested differentiation (the
//!   adversary's loss contains input derivatives of the test network, and we
//!   differentiate those again with respect to the adversary parameters).
//! - [`geometry`] — spherical chart, tangent-frame gradient/divergence,
//!   geometry-compatible flux components and the surface area weight.
//! - [`network`] — MLP parameters, solution/test-network evaluation, the
//!   compact-support cutoff, and checkpoint serialization.
//! - [`residual`] — entropy pairs and the normalized weak-form loss terms.
//! - [`sampler`] — Monte-Carlo and Sobol collocation sets over the space-time
//!   domain plus boundary and initial slices.
//! - [`trainer`] — the min-max training loop with periodic adversary resets,
//!   best-model tracking and ensemble averaging.
//! - [`reference`] — exact and Godunov reference solutions, the separable
//!   lift to the sphere, and the relative L1 test error.
//! - [`construct`] — piecewise-linear approximation networks (squaring,
//!   products, partition of unity, spline interpolation) with their stated
//!   error bounds checked empirically.
//! - [`runner`] — experiment orchestration behind the `wpinn` binary: config
//!   files, result persistence, CSV export and verification suites.
//!
//! Each major capability has a runnable example under `examples/`; start with
//! `cargo run --release --example standing_shock`.

pub mod autodiff;
pub mod config;
pub mod construct;
pub mod geometry;
pub mod network;
pub mod reference;
pub mod residual;
pub mod runner;
pub mod sampler;
pub mod trainer;
pub mod verify;
