//! Layer-wise probing of frozen contextual representations.
//!
//! The crate reads span activations from `APF1` files ([`activation`]),
//! prepares balanced splits of labeled examples ([`corpus`]), trains small
//! edge-probing classifiers ([`probe`]), estimates minimum description length
//! with online coding ([`mdl`]), and runs cross-distribution transfer
//! matrices ([`transfer`]). Reports are written as CSV and SVG ([`report`]).
//!
//! Independent runs (layers, seeds, matrix cells) fan out over a rayon pool
//! when the `parallel` feature is on; every run is itself single-threaded and
//! deterministic, so both execution modes produce bit-identical results.

pub mod activation;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod mdl;
pub mod probe;
pub mod report;
pub mod rng;
pub mod selfcheck;
pub mod transfer;

pub use error::{Error, Result};

/// Version string recorded in run manifests.
pub const ENGINE_VERSION: &str = concat!("layerprobe ", env!("CARGO_PKG_VERSION"));
