//! Point-cloud feature extraction with hybrid-scope graph convolution layers.
//!
//! The crate is organized bottom-up: [`pointcloud`] holds data and synthetic
//! shapes, [`neighbors`] builds kNN receptive fields, [`graphconv`] is the
//! convolution primitive, [`hslayer`] stacks it into the encoder, and
//! [`training`], [`metrics`] and [`harness`] drive experiments on top.
//!
//! Data-parallel loops go through [`exec`]. With the default `parallel`
//! feature they run on rayon; without it they run sequentially. Results are
//! bit-identical either way.

pub mod error;
pub mod exec;
pub mod graphconv;
pub mod harness;
pub mod hslayer;
pub mod linalg;
pub mod metrics;
pub mod neighbors;
pub mod params;
pub mod pointcloud;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
