//! Semi-supervised few-shot 3D pose estimation by neural view synthesis and
//! matching.
//!
//! An object is modelled as a cuboid mesh whose vertices carry feature
//! vectors. Rasterising the mesh at a new pose synthesises the feature map
//! of an unseen view; matching synthesised views against unlabelled images
//! mints pose pseudo-labels, which in turn train a pose-invariant feature
//! extractor. Poses of test images are recovered by render-and-compare.

pub mod error;
pub mod eval;
pub mod featext;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod matching;
pub mod mesh;
pub mod raster;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
