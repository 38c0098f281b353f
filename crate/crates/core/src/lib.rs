//! Bi-level training of pseudo-SVD low-rank adapters.
//!
//! An adapted layer computes `W0 x + (alpha / r) P diag(lambda) Q x` with a
//! frozen `W0`. The singular-vector factors `P`, `Q` are trained on one part
//! of the training data and the singular values `lambda` on the other, the
//! latter through a hypergradient that looks through the former's updates.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices and the deterministic RNG.
//! - [`adapter`]: the adapter layer, its three singular-value maps and exact
//!   gradients.
//! - [`regularizers`]: orthogonality and entropy penalties.
//! - [`bilevel`]: optimizers, the unroll tape and hypergradients.
//! - [`tasks`]: synthetic data, toy models, baseline and bi-level drivers.
//! - [`trace`]: per-step records and their CSV form.
//! - [`gradcheck`]: finite-difference suites used by the `gradcheck` command.
//! - [`cli`]: config files, experiment runs, sweeps and histograms.

pub mod adapter;
pub mod bilevel;
pub mod cli;
pub mod gradcheck;
pub mod linalg;
pub mod regularizers;
pub mod tasks;
pub mod trace;
