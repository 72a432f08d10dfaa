// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod dimension;
pub mod fixtures;
pub mod fusion;
pub mod image;
pub mod io;
pub mod lrf;
pub mod morph;
mod par;
pub mod pipeline;
pub mod scene;
pub mod sgm;
pub mod stereo;
