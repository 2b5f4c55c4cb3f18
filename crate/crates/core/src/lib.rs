//! Sparse-attention neural motion planning on synthetic bird's-eye-view
//! driving scenes.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod planner;
pub mod scene;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
