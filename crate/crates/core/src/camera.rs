//! Pinhole intrinsics, the rectified stereo rig and per-pixel viewing geometry.
//!
//! The polarisation camera defines the world frame: the optical axis is `+z`,
//! image `x` grows to the right and image `y` grows downwards. Pixel
//! coordinates are the integer column/row indices themselves.
//!
//! Direction vectors follow the orientation of the perspective depth normal
//! (see [`crate::geometry::unnormalised_normal`]): a fronto-parallel plane
//! has normal `(0, 0, 1)` and the view vector at the principal point is
//! `(0, 0, 1)`. In this orientation `n̄ · v = cos θ ≥ 0` for every visible
//! surface point, and a light direction of `(0, 0, 1)` illuminates from the
//! camera.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Map, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub x0: f64,
    pub y0: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, x0: f64, y0: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            x0,
            y0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.x0, self.y0]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("camera intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.x0) || !(0.0..self.height as f64).contains(&self.y0) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) lies outside the {}x{} image",
                self.x0, self.y0, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Un-normalised viewing ray `[(x-x0)/fx, (y-y0)/fy, 1]` through a pixel.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.x0) / self.fx, (y - self.y0) / self.fy, 1.0)
    }

    /// Unit view vector at a pixel; independent of depth.
    #[inline]
    pub fn view_vector(&self, x: f64, y: f64) -> Vector3<f64> {
        self.ray(x, y).normalize()
    }

    /// 3D point at pixel `(x, y)` with depth `z`.
    #[inline]
    pub fn backproject_pixel(&self, x: f64, y: f64, z: f64) -> Point3<f64> {
        Point3::from(self.ray(x, y) * z)
    }

    /// Pinhole projection of a camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64) {
        (
            self.x0 + self.fx * p.x / p.z,
            self.y0 + self.fy * p.y / p.z,
        )
    }
}

/// Backprojects every valid depth pixel to a camera-frame point.
pub fn backproject(depth: &ScalarMap, cam: &CameraIntrinsics) -> Map<Point3<f64>> {
    let mut out = Map::invalid(depth.width(), depth.height(), Point3::origin());
    for (x, y, &z) in depth.iter_valid() {
        out.set(x, y, cam.backproject_pixel(x as f64, y as f64, z));
    }
    out
}

/// Rectified two-camera rig. The right camera is translated by `baseline`
/// metres along `+x` of the left (polarisation) camera with parallel image
/// planes. The principal points may differ between the two cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(left: CameraIntrinsics, right: CameraIntrinsics, baseline: f64) -> Result<Self> {
        let rig = Self {
            left,
            right,
            baseline,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "baseline must be positive, got {}",
                self.baseline
            )));
        }
        if self.left.fx != self.right.fx || self.left.fy != self.right.fy || self.left.y0 != self.right.y0 {
            return Err(Error::InvalidInput(
                "rectified rig requires equal focal lengths and principal rows".into(),
            ));
        }
        Ok(())
    }

    /// Disparity offset `x0_right - x0_left` added to the measured disparity
    /// before triangulating.
    pub fn disparity_offset(&self) -> f64 {
        self.right.x0 - self.left.x0
    }

    /// Maps a left-camera point into the right camera frame.
    pub fn to_right(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::new(p.x - self.baseline, p.y, p.z)
    }
}
