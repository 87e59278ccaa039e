//! Dense metric depth and albedo from a polarisation image and a second view.

pub mod albedo;
pub mod camera;
pub mod depth;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mrf;
pub mod pipeline;
pub mod polarisation;
pub mod sparse;
pub mod stereo;
pub mod synth;

pub use camera::{CameraIntrinsics, StereoRig};
pub use error::{Error, Result};
pub use image::{Map, Mask, ScalarMap, VectorMap};
