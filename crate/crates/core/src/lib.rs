//! Verification toolkit for stochastic monotonicity and propagation of
//! integral stochastic orders of Markov processes.
//!
//! The pipeline follows the generator/resolvent route: an order is encoded
//! by a linear map `Phi`, and monotonicity of a semigroup is certified by
//! exhibiting operators `B` (resolvent positive) and `C` (positive) with
//! `Phi A = B Phi + C Phi`. Everything here runs on exact finite state
//! spaces: positivity-preserving discretizations of 1-d and 2-d diffusions
//! with Feller boundary conditions, and finite spin systems, cross-validated
//! by resolvent solves, uniformized matrix exponentials and Monte Carlo
//! simulation.

pub mod approxops;
pub mod diffusion1d;
pub mod discretize;
pub mod expr;
pub mod ips;
pub mod model;
pub mod multid;
pub mod order;
pub mod par;
pub mod report;
pub mod semigroup;
