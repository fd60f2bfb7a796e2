//! Policy search with heavy-tailed policies and stochastic recursive
//! mirror ascent (SRMA).
//!
//! The crate is organised bottom-up:
//!
//! - [`policies`]: Gaussian and Cauchy linear-mean policies, scores, KLs.
//! - [`envs`]: the Pathological Mountain Car and a linear-quadratic chain.
//! - [`sampling`]: geometric random horizons and rollouts.
//! - [`gradients`]: random-horizon and importance-sampled estimators, the
//!   gradient tracker.
//! - [`mirror`]: Bregman geometries, prox step, generalized gradient.
//! - [`algorithms`]: SRMA, SMA, RPG and STORM loops, step-size rules.
//! - [`analysis`]: exploration tolerance, smoothness constants, synthetic
//!   objectives and the tracking-error probe.
//! - [`harness`]: configuration, seeded multi-run experiments, CSV output
//!   and the command-line interface.

pub mod error;
pub mod linalg;
pub mod quadrature;

pub mod algorithms;
pub mod analysis;
pub mod envs;
pub mod gradients;
pub mod harness;
pub mod mirror;
pub mod policies;
pub mod sampling;
