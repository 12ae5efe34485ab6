//! Dense visual descriptors learned from synthetic correspondences.
//!
//! Two augmented views of one image (or two posed RGB-D frames) give pixel
//! correspondences for free; a small fully-convolutional encoder is trained
//! with a contrastive loss so corresponding pixels get matching descriptors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geomcorr;
pub mod heatmap;
pub mod image;
pub mod loss;
mod par;
pub mod rng;
pub mod scalar;
pub mod scenegen;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use image::Image;
pub use rng::Rng;
