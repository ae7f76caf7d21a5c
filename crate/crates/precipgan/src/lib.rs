//! Adversarially trained conditional generation of gridded precipitation,
//! plus the verification toolkit used to judge such forecasts.
//!
//! The crate provides, end to end:
//!
//! - a synthetic heavy-tailed precipitation dataset with known statistics
//!   ([`synth`]), and a NetCDF-3 container for externally produced gridded
//!   datasets ([`data`]);
//! - a conditional generator with a multi-scale input stream,
//!   feature-adaptive denormalization and an additive noise stream
//!   ([`model`]), trained against multi-scale patch discriminators
//!   ([`train`]);
//! - zero-shot ensemble inference ([`ensemble`]);
//! - forecast verification: zonal power spectra, extreme percentiles,
//!   fractional contributions, latitude-weighted anomaly correlation and a
//!   Gaussian-blur ablation ([`metrics`]).
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the `precipgan` binary for the command-line interface.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grid;
pub mod kahan;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
