//! Trajectory-matching dataset distillation at desk scale.
//!
//! The crate trains expert trajectories on a real (toy) dataset, distills a
//! small synthetic set by matching segments of those trajectories through an
//! unrolled inner SGD loop, and evaluates the result by training fresh
//! networks on it with labels regenerated in default order.
//!
//! Modules:
//! - [`diffnet`]: networks, losses, gradients, inner unroll and hypergradients
//! - [`trajstore`]: expert training, trajectory buffers, matching-range schedule
//! - [`distill`]: synthetic set, matching loss and the outer loop
//! - [`evalharness`]: default-order evaluation, baselines, label audit
//! - [`datakit`]: toy data, normalization, distilled export, image grids
//! - [`cli`]: config parsing and the `distillforge` subcommands

pub mod cli;
pub mod datakit;
pub mod diffnet;
pub mod distill;
pub mod error;
pub mod evalharness;
pub mod exec;
pub mod trajstore;

pub use error::{ConfigError, Error, ExportError, FormatError, Result};
