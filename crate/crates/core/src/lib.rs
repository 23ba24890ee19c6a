//! Physics-informed wireless radiance field.
//!
//! Rays are cast from a receiver along (noisy) directions of arrival, split
//! into conical frustums, lifted through a scale-consistent PE+IPE hybrid
//! encoding and evaluated by one shared MLP in a coarse and a fine stage. The
//! per-interval densities and complex amplitudes are composited with
//! free-space loss and Fresnel-derived interaction attenuation into the
//! channel frequency response (CFR) seen at the receiver.
//!
//! Ground truth for training and verification comes from an image-method
//! simulator for shoebox rooms ([`dataset`]).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
mod container;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod network;
pub mod optim;
pub mod par;
pub mod physics;
pub mod pipeline;
pub mod sampling;
pub mod seed;
pub mod synthesis;
pub mod trainer;
pub mod vec3;

pub use error::{Error, Result};
pub use num_complex::Complex64;
