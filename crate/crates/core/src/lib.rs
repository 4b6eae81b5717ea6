//! Early-exit inference runtime and edge/fog/cloud deployment simulator for
//! 1-D convolutional beat classifiers.
//!
//! A baseline CNN is cut at convolutional-block boundaries into two or three
//! sub-networks. Every cut carries a small classifier head and a dense
//! encoder/decoder pair: a beat whose head confidence clears the threshold
//! exits early, everything else crosses the link as a compact bottleneck
//! vector and is reconstructed on the next node.
//!
//! Modules, bottom-up:
//!
//! - [`beatset`]: beat records, resampling, synthetic generation, splits, `.beats` files
//! - [`nn`]: the 1-D layer engine, FLOPs accounting and the `.dcn` model format
//! - [`exit_graph`]: exit placements, exit branches and partition plans
//! - [`cascade`]: confidence-gated staged inference
//! - [`trainer`]: joint multi-head training
//! - [`evaluator`]: threshold sweeps and system metrics
//! - [`ga`]: genetic and exhaustive search over placements and thresholds
//! - [`deploy_sim`]: duty-cycle energy model and link latency
//! - [`cli`]: the `exitnet` command-line front end
//!
//! See the `examples/` directory of this crate for one runnable program per capability.

pub mod beatset;
pub mod cascade;
pub mod cli;
pub mod deploy_sim;
pub mod error;
pub mod evaluator;
pub mod exit_graph;
pub mod ga;
mod io_util;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
