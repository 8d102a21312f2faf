//! Memory-based multi-source meta-learning for domain-generalizable
//! metric learning, at desk scale.
//!
//! The crate is organized bottom-up: [`autodiff`] provides a tape whose
//! gradients can be differentiated again; [`encoder`], [`memory`],
//! [`metabn`] and [`losses`] build the model and objectives on top of it;
//! [`trainer`] runs the episodic meta-optimization; [`evalkit`] scores the
//! held-out domain; [`experiment`] wires configs, runs and reports.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metabn;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
