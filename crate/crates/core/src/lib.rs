//! Penalization solver for doubly reflected backward SDEs driven by
//! G-Brownian motion, on a recombining adversarial-volatility lattice.
//!
//! * [`expr`]: expression language for the problem data.
//! * [`lattice`]: the sublinear one-step operator and G-expectations.
//! * [`solver`]: penalized and projected backward schemes.
//! * [`diagnostics`]: convergence, comparison and oracle checks.
//! * [`acceptance`]: the end-to-end acceptance suite.

pub mod acceptance;
pub mod diagnostics;
pub mod expr;
pub mod lattice;
mod parallel;
pub mod solver;
