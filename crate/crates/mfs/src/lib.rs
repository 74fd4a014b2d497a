//! Numerical laboratory for optimal control of one-dimensional mean-field
//! (McKean–Vlasov) jump diffusions.
//!
//! The crate simulates interacting-particle approximations of controlled
//! jump SDEs whose coefficients depend on the population mean, solves the
//! associated first- and second-order adjoint backward equations by
//! least-squares Monte Carlo regression (with a deterministic backward-Euler
//! oracle for models whose adjoint coefficients are deterministic), and
//! verifies the variational machinery behind the stochastic maximum
//! principle: spike perturbations, first/second variation processes and
//! their moment rates, duality relations, an exponential representation of
//! the first variation, and the Hamiltonian inequality itself.
//!
//! Modules mirror the pipeline:
//!
//! * [`model`] — coefficient sets, jump measures, controls, builtin families,
//!   hypothesis probing.
//! * [`stochastics`] — time grids, reproducible counter-keyed noise streams,
//!   jump trains, compensated integrals, martingale moment checks.
//! * [`forward`] — interacting-particle Euler simulation and cost evaluation.
//! * [`adjoint`] — backward adjoint solvers, Hamiltonian helpers.
//! * [`variation`] — spike controls, variation processes, rate estimation,
//!   duality and representation checks.
//! * [`smp`] — maximum-principle functional, verdicts, cost gaps, and a
//!   projected-gradient oracle optimizer.
//! * [`cli`] — experiment configs, runners, and deterministic reports.

pub mod adjoint;
pub mod cli;
pub mod forward;
pub mod model;
pub mod smp;
pub mod stochastics;
pub mod variation;

/// Library version recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
