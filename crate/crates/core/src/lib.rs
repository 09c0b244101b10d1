//! Single-perspective image stitching.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apap;
pub mod bundle;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod linework;
pub mod meshwarp;
pub mod pipeline;
pub mod quasihomography;
pub mod raster;
pub mod render;
pub mod sparse;

pub use error::{Error, Result};
