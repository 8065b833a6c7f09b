//! Image splicing localization: a dual-branch (RGB and noise residual)
//! hierarchical network with cross-scale and cross-domain fusion, edge
//! supervision and a coarse-to-fine mask head.
//!
//! [`model::SpliceNet`] is the network, [`trainer::Trainer`] trains it,
//! [`metrics::evaluate`] scores it and [`datagen`] makes synthetic splices.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod edge_head;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loc_head;
pub mod metrics;
pub mod model;
pub mod noise_front;
pub mod objective;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
