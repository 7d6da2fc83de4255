//! Compression of individual transformer weight matrices with per-call
//! verified error bounds, plus the sensitivity / stability / allocation
//! experiment harness built on top of it.
//!
//! The pipeline per weight matrix is: magnitude sparsification, SVD
//! truncation of the retained part, and semantic caching of low-rank
//! outputs. Every approximate matrix-vector product is accompanied by an
//! operator-norm error bound, and a [`approx::BoundLedger`] records the
//! measured error against that bound on every call.
//!
//! The experiment harness drives a minimal Pre-LN GPT-2-style forward pass
//! ([`model`]), perturbation traces and contraction analysis ([`lyapunov`]),
//! ablation sweeps ([`sensitivity`]), calibration-aware pruning
//! ([`pruning`]), and greedy compression allocation ([`allocation`]).

pub mod allocation;
pub mod approx;
pub mod container;
pub mod error;
pub mod groups;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod pruning;
pub mod sensitivity;

pub use error::{Error, Result};
pub use groups::{ComponentType, CompressionGroup, MatrixId};
pub use linalg::{Matrix, SvdFactors};
