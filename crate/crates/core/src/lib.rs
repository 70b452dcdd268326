//! Sparsity-invariant training for LiDAR 3D detection.
//!
//! The crate covers the full loop at desk scale: beam-aware density
//! augmentation of point clouds, confidence-based choice of the density to
//! train on, and a frozen-teacher / trainable-student stage that aligns
//! proposal features (FCA) and their pairwise relationships (GERA). A
//! synthetic LiDAR simulator and a tiny differentiable BEV detector exercise
//! everything end to end, and KITTI-style AP@R40 plus the closed-gap metric
//! score the result.

pub mod align;
pub mod beams;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod select;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
