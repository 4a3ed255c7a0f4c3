//! Continuous-time directed polymers in Gaussian random environments.
//!
//! The crate covers the full pipeline from environment synthesis to
//! free-energy scaling fits:
//!
//! * [`covariance`]: spatial covariance families `Q`, the canonical metric
//!   `δ(x) = sqrt(2(Q(0) - Q(x)))` and circulant spectra on periodic lattices.
//! * [`environment`]: Brownian-in-time Gaussian increment fields `W` with
//!   spatial covariance `Q`, sampled per (seed, replica, step).
//! * [`polymer`]: continuous-time lattice walks, ε-discretized Brownian paths
//!   and their Hamiltonians.
//! * [`partition`]: `log Z_t` by transfer matrix, exhaustive enumeration and
//!   Monte Carlo.
//! * [`free_energy`]: replica-averaged `p_t(β)`, horizon extrapolation, β
//!   sweeps, scaling fits and the invariant battery.
//! * [`cli`]: the configuration-driven `polymer` command-line tool.
//!
//! Parallelism over replicas and paths uses rayon when the `parallel` feature
//! is enabled (the default); every result is keyed by replica id so the output
//! does not depend on the number of worker threads.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covariance;
pub mod environment;
mod error;
pub mod exec;
pub mod free_energy;
pub mod partition;
pub mod polymer;
pub mod seeding;
pub mod stats;

pub use error::{Error, Result};
