//! Perspective surface normals from depth and the finite-difference stencils
//! shared by the guide-normal computation and the global depth operator.

use nalgebra::Vector3;

use crate::camera::CameraIntrinsics;
use crate::error::Result;
use crate::image::{Mask, ScalarMap, VectorMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// How derivatives are approximated on a masked grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifferenceScheme {
    /// Forward difference, backward where the forward neighbour is missing.
    Forward,
    /// Central difference smoothed by `[1/4, 1/2, 1/4]` across the other axis
    /// where the six neighbours exist, then plain central, then forward or
    /// backward.
    SmoothedCentral,
}

/// Finite-difference taps `(dx, dy, weight)` relative to the centre pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    taps: [(isize, isize, f64); 6],
    len: usize,
}

impl Stencil {
    fn from_taps(list: &[(isize, isize, f64)]) -> Self {
        let mut taps = [(0, 0, 0.0); 6];
        taps[..list.len()].copy_from_slice(list);
        Self {
            taps,
            len: list.len(),
        }
    }

    pub fn taps(&self) -> &[(isize, isize, f64)] {
        &self.taps[..self.len]
    }

    /// Evaluates the stencil on `map` at `(x, y)`. Taps must be in bounds.
    pub fn apply(&self, map: &ScalarMap, x: usize, y: usize) -> f64 {
        self.taps()
            .iter()
            .map(|&(dx, dy, w)| {
                let xx = (x as isize + dx) as usize;
                let yy = (y as isize + dy) as usize;
                w * map.get(xx, yy)
            })
            .sum()
    }
}

/// Chooses the derivative stencil at `(x, y)` along `axis`, or `None` when the
/// pixel has no neighbour along that axis.
pub fn derivative_stencil(
    mask: &Mask,
    x: usize,
    y: usize,
    axis: Axis,
    scheme: DifferenceScheme,
) -> Option<Stencil> {
    let (xi, yi) = (x as isize, y as isize);
    // (along, across) offsets mapped to (dx, dy)
    let at = |along: isize, across: isize| -> (isize, isize) {
        match axis {
            Axis::X => (along, across),
            Axis::Y => (across, along),
        }
    };
    let has = |along: isize, across: isize| {
        let (dx, dy) = at(along, across);
        mask.get_signed(xi + dx, yi + dy)
    };
    let tap = |along: isize, across: isize, w: f64| {
        let (dx, dy) = at(along, across);
        (dx, dy, w)
    };

    let fwd = has(1, 0);
    let bwd = has(-1, 0);

    if scheme == DifferenceScheme::SmoothedCentral && fwd && bwd {
        if (-1..=1).all(|c| has(1, c) && has(-1, c)) {
            return Some(Stencil::from_taps(&[
                tap(-1, -1, -0.125),
                tap(1, -1, 0.125),
                tap(-1, 0, -0.25),
                tap(1, 0, 0.25),
                tap(-1, 1, -0.125),
                tap(1, 1, 0.125),
            ]));
        }
        return Some(Stencil::from_taps(&[tap(-1, 0, -0.5), tap(1, 0, 0.5)]));
    }
    if fwd {
        Some(Stencil::from_taps(&[tap(0, 0, -1.0), tap(1, 0, 1.0)]))
    } else if bwd {
        Some(Stencil::from_taps(&[tap(-1, 0, -1.0), tap(0, 0, 1.0)]))
    } else {
        None
    }
}

/// Finite-difference derivative of `z` along `axis` on its valid pixels.
/// Pixels without a neighbour along the axis are left invalid.
pub fn derivative(z: &ScalarMap, axis: Axis, scheme: DifferenceScheme) -> ScalarMap {
    let mask = z.mask();
    let mut out = ScalarMap::invalid(z.width(), z.height(), 0.0);
    for (x, y, _) in z.iter_valid() {
        if let Some(st) = derivative_stencil(&mask, x, y, axis, scheme) {
            out.set(x, y, st.apply(z, x, y));
        }
    }
    out
}

/// Perspective surface normal (un-normalised) from depth and its image-space
/// derivatives: `[-fx·Zx, -fy·Zy, (x-x0)·Zx + (y-y0)·Zy + Z]`, the cross
/// product of the backprojected tangents scaled by `fx·fy / Z`.
pub fn normal_from_derivatives(
    cam: &CameraIntrinsics,
    x: f64,
    y: f64,
    z: f64,
    zx: f64,
    zy: f64,
) -> Vector3<f64> {
    Vector3::new(
        -cam.fx * zx,
        -cam.fy * zy,
        (x - cam.x0) * zx + (y - cam.y0) * zy + z,
    )
}

/// Per-pixel un-normalised perspective normals. Valid where all inputs are.
pub fn unnormalised_normal(
    z: &ScalarMap,
    zx: &ScalarMap,
    zy: &ScalarMap,
    cam: &CameraIntrinsics,
) -> Result<VectorMap> {
    zx.check_dims(z.dims())?;
    zy.check_dims(z.dims())?;
    let out = VectorMap::from_fn(z.width(), z.height(), Vector3::zeros(), |x, y| {
        let d = z.valid(x, y)?;
        let dx = zx.valid(x, y)?;
        let dy = zy.valid(x, y)?;
        Some(normal_from_derivatives(cam, x as f64, y as f64, *d, *dx, *dy))
    });
    Ok(out)
}

/// Unit normals of a depth map using the given difference scheme. Pixels
/// lacking a neighbour on either axis, or with a degenerate normal, are invalid.
pub fn depth_normals(z: &ScalarMap, cam: &CameraIntrinsics, scheme: DifferenceScheme) -> Result<VectorMap> {
    let zx = derivative(z, Axis::X, scheme);
    let zy = derivative(z, Axis::Y, scheme);
    let n = unnormalised_normal(z, &zx, &zy, cam)?;
    Ok(VectorMap::from_fn(n.width(), n.height(), Vector3::zeros(), |x, y| {
        let v = n.valid(x, y)?;
        let len = v.norm();
        (len > 0.0 && len.is_finite()).then(|| v / len)
    }))
}

/// Angle in radians between two vectors, robust near 0 and π.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
