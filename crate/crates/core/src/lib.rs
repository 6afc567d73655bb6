// `!(x > 0.0)` is used on purpose so NaN is rejected along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod depth_align;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod placement;
pub mod refine;
pub mod render;
pub mod repaint;
pub mod voxel;

pub use error::{Error, Result};
