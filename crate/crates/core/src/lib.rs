//! Training neural networks with each neuron's weight vector constrained to
//! the unit Lp-sphere.
//!
//! The crate provides:
//! - spherical geometry primitives (signed powers, Lp norms, the
//!   dual-normalized gradient) in [`geometry`],
//! - the constrained optimizers and step-size diagnostics in [`optim`],
//! - a closed-form prediction of Hoyer sparsity at stationarity in
//!   [`hoyer`], with a Monte Carlo cross-check,
//! - adaptive drop/grow topology evolution in [`evolution`],
//! - a small f64 neural network (dense/conv/pool/batchnorm) with exact
//!   backprop in [`nn`], plus finite-difference checking in [`gradcheck`],
//! - a deterministic training harness and on-disk formats in [`harness`],
//!   exposed through the `lpss` command-line tool.

pub mod cli;
pub mod error;
pub mod evolution;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod hoyer;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod special;

pub use error::{LpssError, Result};
