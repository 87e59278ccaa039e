//! Six-way surface normal hypotheses from phase and degree of polarisation.
//!
//! The phase angle confines the normal to a plane containing the optical axis
//! (the plane spanned by `ẑ` and the image-plane azimuth direction). The
//! zenith constraint `n̄ · v = cos θ` confines it to a cone around the view
//! vector. Their intersection is two unit vectors, one per azimuth branch.
//! Diffuse pixels give one such pair; specular pixels give a pair for each of
//! the two zenith roots, with the azimuth rotated by `π/2`.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::decompose::PolarisationImage;
use super::dop::{invert_dop_diffuse, invert_dop_specular, ReflectanceKind, RefractiveIndex};
use crate::camera::CameraIntrinsics;
use crate::error::Result;
use crate::image::Mask;

/// Number of candidate slots per pixel.
pub const SLOTS: usize = 6;

/// Slot layout: `0, 1` diffuse (azimuth `φ`, `φ + π`), `2, 3` specular low
/// zenith root (`±`), `4, 5` specular high zenith root (`±`).
pub fn slot_kind(slot: usize) -> ReflectanceKind {
    if slot < 2 {
        ReflectanceKind::Diffuse
    } else {
        ReflectanceKind::Specular
    }
}

/// Unit image-plane direction of a diffuse normal for phase `phi`.
#[inline]
pub fn diffuse_azimuth_direction(phi: f64) -> Vector3<f64> {
    Vector3::new(phi.sin(), phi.cos(), 0.0)
}

/// Unit image-plane direction of a specular normal for phase `phi`.
#[inline]
pub fn specular_azimuth_direction(phi: f64) -> Vector3<f64> {
    Vector3::new(phi.cos(), -phi.sin(), 0.0)
}

/// The two unit normals in span{ẑ, d} with `n · v = cos_theta`, ordered so
/// the first leans toward `+d`. When the cone misses the plane the closest
/// direction is returned twice and the flag is set.
pub fn plane_cone_intersection(v: &Vector3<f64>, d: &Vector3<f64>, cos_theta: f64) -> ([Vector3<f64>; 2], bool) {
    let dv = d.dot(v);
    let r = v.z.hypot(dv);
    let gamma = dv.atan2(v.z);
    let ratio = cos_theta / r;
    let missed = ratio > 1.0;
    let delta = ratio.clamp(-1.0, 1.0).acos();
    let at = |beta: f64| (Vector3::z() * beta.cos() + d * beta.sin()).normalize();
    ([at(gamma + delta), at(gamma - delta)], missed)
}

/// Candidate normals per pixel in fixed slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateField {
    width: usize,
    height: usize,
    slots: Vec<[Option<Vector3<f64>>; SLOTS]>,
}

/// Counters from candidate construction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CandidateStats {
    /// Pixels without candidates because the polarisation is too weak.
    pub low_polarisation: usize,
    /// Pixels whose degree of polarisation exceeded the diffuse maximum.
    pub diffuse_clamped: usize,
    /// Candidate pairs whose zenith cone did not meet the phase plane.
    pub cone_misses: usize,
}

impl CandidateField {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            slots: vec![[None; SLOTS]; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> &[Option<Vector3<f64>>; SLOTS] {
        &self.slots[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, slots: [Option<Vector3<f64>>; SLOTS]) {
        self.slots[y * self.width + x] = slots;
    }

    /// Number of populated slots at a pixel.
    pub fn count(&self, x: usize, y: usize) -> usize {
        self.get(x, y).iter().filter(|s| s.is_some()).count()
    }
}

/// Builds up to six candidate normals per foreground pixel. Pixels flagged
/// low-polarisation receive no candidates.
pub fn candidates(pol: &PolarisationImage, eta: RefractiveIndex, cam: &CameraIntrinsics) -> Result<(CandidateField, CandidateStats)> {
    let (w, h) = pol.dims();
    pol.iun.check_dims(cam.dims())?;
    let results: Vec<Result<([Option<Vector3<f64>>; SLOTS], CandidateStats)>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let mut stats = CandidateStats::default();
            let mut out = [None; SLOTS];
            if !pol.mask.get(x, y) {
                return Ok((out, stats));
            }
            if pol.low_polarisation.get(x, y) {
                stats.low_polarisation = 1;
                return Ok((out, stats));
            }
            let v = cam.view_vector(x as f64, y as f64);
            let phi = *pol.phi.get(x, y);
            let rho = *pol.rho.get(x, y);

            let dz = invert_dop_diffuse(rho, eta)?;
            stats.diffuse_clamped = dz.clamped as usize;
            let (pair, miss) = plane_cone_intersection(&v, &diffuse_azimuth_direction(phi), dz.cos_theta);
            stats.cone_misses += miss as usize;
            out[0] = Some(pair[0]);
            out[1] = Some(pair[1]);

            let sz = invert_dop_specular(rho, eta)?;
            let ds = specular_azimuth_direction(phi);
            for (k, c) in [sz.cos_lo(), sz.cos_hi()].into_iter().enumerate() {
                let (pair, miss) = plane_cone_intersection(&v, &ds, c);
                stats.cone_misses += miss as usize;
                out[2 + 2 * k] = Some(pair[0]);
                out[3 + 2 * k] = Some(pair[1]);
            }
            Ok((out, stats))
        })
        .collect();

    let mut field = CandidateField::empty(w, h);
    let mut stats = CandidateStats::default();
    for (i, r) in results.into_iter().enumerate() {
        let (slots, s) = r?;
        field.slots[i] = slots;
        stats.low_polarisation += s.low_polarisation;
        stats.diffuse_clamped += s.diffuse_clamped;
        stats.cone_misses += s.cone_misses;
    }
    if stats.cone_misses > 0 {
        log::debug!("{} candidate pair(s) clamped to the phase plane", stats.cone_misses);
    }
    Ok((field, stats))
}

/// Mask of pixels that have at least one candidate.
pub fn candidate_support(field: &CandidateField) -> Mask {
    let (w, h) = field.dims();
    Mask::from_fn(w, h, |x, y| field.count(x, y) > 0)
}
