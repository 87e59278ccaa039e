//! Transmitted-radiance sinusoid: forward simulation behind a rotating linear
//! polariser and per-pixel least-squares decomposition.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Mask, ScalarMap};

/// Below this degree of polarisation the phase angle is treated as noise.
pub const LOW_POLARISATION: f64 = 1e-3;

/// Phase, degree of polarisation and unpolarised intensity per pixel.
///
/// `phi` lies in `[0, π)` and is measured from the image `y` axis toward the
/// image `x` axis, so a diffuse pixel's surface normal projects onto the
/// image plane along `±(sin φ, cos φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarisationImage {
    pub phi: ScalarMap,
    pub rho: ScalarMap,
    pub iun: ScalarMap,
    /// Foreground pixels with a valid decomposition.
    pub mask: Mask,
    /// Pixels whose degree of polarisation is too small for a reliable phase.
    pub low_polarisation: Mask,
}

impl PolarisationImage {
    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Builds an image from maps; the mask is the intersection of their
    /// validity and low-polarisation pixels are flagged.
    pub fn from_maps(phi: ScalarMap, rho: ScalarMap, iun: ScalarMap) -> Result<Self> {
        rho.check_dims(phi.dims())?;
        iun.check_dims(phi.dims())?;
        let (w, h) = phi.dims();
        let mask = Mask::from_fn(w, h, |x, y| phi.is_valid(x, y) && rho.is_valid(x, y) && iun.is_valid(x, y));
        for (name, m) in [("phi", &phi), ("rho", &rho), ("iun", &iun)] {
            m.check_finite(name)?;
        }
        let low_polarisation = Mask::from_fn(w, h, |x, y| mask.get(x, y) && *rho.get(x, y) < LOW_POLARISATION);
        Ok(Self {
            phi: phi.with_mask(&mask),
            rho: rho.with_mask(&mask),
            iun: iun.with_mask(&mask),
            mask,
            low_polarisation,
        })
    }

    /// Restricts the foreground to `mask`.
    pub fn restrict(mut self, mask: &Mask) -> Self {
        self.mask = self.mask.and(mask);
        self.low_polarisation = self.low_polarisation.and(&self.mask);
        self.phi = self.phi.with_mask(&self.mask);
        self.rho = self.rho.with_mask(&self.mask);
        self.iun = self.iun.with_mask(&self.mask);
        self
    }
}

/// Folds an angle into `[0, π)`.
pub fn canonical_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(PI);
    if p >= PI {
        p -= PI;
    }
    // collapse -0.0
    p + 0.0
}

/// Intensity behind a polariser at angle `vartheta` for each pixel of
/// `(iun, rho, phi)`. Pixels invalid in any input are invalid in every output.
pub fn simulate_polariser_stack(
    iun: &ScalarMap,
    rho: &ScalarMap,
    phi: &ScalarMap,
    angles: &[f64],
) -> Result<Vec<ScalarMap>> {
    if angles.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "at least 3 polariser angles are required, got {}",
            angles.len()
        )));
    }
    rho.check_dims(iun.dims())?;
    phi.check_dims(iun.dims())?;
    let (w, h) = iun.dims();
    let stack = angles
        .iter()
        .map(|&t| {
            ScalarMap::from_fn(w, h, 0.0, |x, y| {
                let (i, r, p) = (iun.valid(x, y)?, rho.valid(x, y)?, phi.valid(x, y)?);
                Some(i * (1.0 + r * (2.0 * t - 2.0 * p).cos()))
            })
        })
        .collect();
    Ok(stack)
}

/// Decomposition output with counters for pixels that needed intervention.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub image: PolarisationImage,
    /// Pixels whose fitted degree of polarisation exceeded one.
    pub clamped: usize,
    /// Pixels dropped because the fitted mean intensity was not positive.
    pub rejected: usize,
}

fn is_closed_form_set(angles: &[f64]) -> bool {
    let deg = [0.0, 45f64.to_radians(), 90f64.to_radians()];
    angles.len() == 3 && angles.iter().zip(deg).all(|(a, d)| *a == d)
}

/// Least-squares fit of `c0 + c1 cos 2ϑ + c2 sin 2ϑ` at every pixel.
///
/// Angles must include at least three distinct values modulo `π`. A pixel is
/// used only where every image in the stack is valid.
pub fn decompose(stack: &[(f64, ScalarMap)]) -> Result<Decomposition> {
    if stack.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "at least 3 polariser images are required, got {}",
            stack.len()
        )));
    }
    let dims = stack[0].1.dims();
    for (_, img) in stack {
        img.check_dims(dims)?;
    }
    let angles: Vec<f64> = stack.iter().map(|(a, _)| *a).collect();
    let mut distinct: Vec<f64> = angles.iter().map(|a| canonical_phase(*a)).collect();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() >= 2 && (distinct[0] + PI - distinct[distinct.len() - 1]).abs() < 1e-9 {
        distinct.pop();
    }
    if distinct.len() < 3 {
        return Err(Error::InvalidInput(
            "polariser angles must take at least 3 distinct values modulo 180 degrees".into(),
        ));
    }

    let closed_form = is_closed_form_set(&angles);
    // pseudoinverse rows of the regressor matrix
    let mut xtx = Matrix3::zeros();
    for &t in &angles {
        let r = Vector3::new(1.0, (2.0 * t).cos(), (2.0 * t).sin());
        xtx += r * r.transpose();
    }
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("polariser angles give a singular fit".into()))?;
    let pinv: Vec<Vector3<f64>> = angles
        .iter()
        .map(|&t| inv * Vector3::new(1.0, (2.0 * t).cos(), (2.0 * t).sin()))
        .collect();

    let (w, h) = dims;
    let n = w * h;
    struct Px {
        iun: f64,
        rho: f64,
        phi: f64,
        ok: bool,
        clamped: bool,
        rejected: bool,
    }
    let pixels: Vec<Px> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !stack.iter().all(|(_, img)| img.is_valid(x, y)) {
                return Px {
                    iun: 0.0,
                    rho: 0.0,
                    phi: 0.0,
                    ok: false,
                    clamped: false,
                    rejected: false,
                };
            }
            let c = if closed_form {
                let (i0, i45, i90) = (*stack[0].1.get(x, y), *stack[1].1.get(x, y), *stack[2].1.get(x, y));
                let c0 = 0.5 * (i0 + i90);
                Vector3::new(c0, 0.5 * (i0 - i90), i45 - c0)
            } else {
                let mut c = Vector3::zeros();
                for ((_, img), p) in stack.iter().zip(&pinv) {
                    c += p * *img.get(x, y);
                }
                c
            };
            if !(c[0] > 0.0) || !c.iter().all(|v| v.is_finite()) {
                return Px {
                    iun: 0.0,
                    rho: 0.0,
                    phi: 0.0,
                    ok: false,
                    clamped: false,
                    rejected: true,
                };
            }
            let raw = c[1].hypot(c[2]) / c[0];
            Px {
                iun: c[0],
                rho: raw.min(1.0),
                phi: canonical_phase(0.5 * c[2].atan2(c[1])),
                ok: true,
                clamped: raw > 1.0,
                rejected: false,
            }
        })
        .collect();

    let mask = Mask::from_vec(w, h, pixels.iter().map(|p| p.ok).collect())?;
    let take = |f: fn(&Px) -> f64| ScalarMap::from_parts(w, h, pixels.iter().map(f).collect(), mask.as_slice().to_vec());
    let image = PolarisationImage {
        phi: take(|p| p.phi)?,
        rho: take(|p| p.rho)?,
        iun: take(|p| p.iun)?,
        low_polarisation: Mask::from_vec(w, h, pixels.iter().map(|p| p.ok && p.rho < LOW_POLARISATION).collect())?,
        mask,
    };
    let clamped = pixels.iter().filter(|p| p.clamped).count();
    let rejected = pixels.iter().filter(|p| p.rejected).count();
    if clamped > 0 {
        log::warn!("degree of polarisation clamped to 1 at {clamped} pixel(s)");
    }
    if rejected > 0 {
        log::warn!("{rejected} pixel(s) with non-positive mean intensity masked out");
    }
    Ok(Decomposition {
        image,
        clamped,
        rejected,
    })
}
