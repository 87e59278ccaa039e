//! Unary, pairwise and ternary potentials and the initial specular mask.

use nalgebra::Vector3;

use super::graph::{MismatchRule, MrfWeights};
use crate::image::{Mask, ScalarMap};
use crate::polarisation::ReflectanceKind;

/// Lower bound on `n_z` when converting a normal to surface gradients.
pub const NZ_CLAMP: f64 = 1e-3;

/// Flags pixels whose unpolarised intensity reaches `sat_threshold` of the
/// sensor's full range as specular.
pub fn initial_specular_mask(iun: &ScalarMap, sat_threshold: f64, max_range: f64) -> Mask {
    let (w, h) = iun.dims();
    let level = sat_threshold * max_range;
    Mask::from_fn(w, h, |x, y| iun.valid(x, y).is_some_and(|&i| i >= level))
}

/// `exp(−n · n̂)`, scaled by the mismatch rule when `kind` disagrees with the
/// initial mask. An absent guide normal gives `f = 1` before the mismatch
/// rule, so the initial mask still applies.
pub fn unary_cost(
    n: &Vector3<f64>,
    guide: Option<&Vector3<f64>>,
    initial_specular: bool,
    kind: ReflectanceKind,
    weights: &MrfWeights,
) -> f64 {
    let f = guide.map_or(1.0, |g| (-n.dot(g)).exp());
    let agrees = (kind == ReflectanceKind::Specular) == initial_specular;
    if agrees {
        f
    } else {
        match weights.mismatch {
            MismatchRule::Divide => f / weights.k,
            MismatchRule::Multiply => weights.k * f,
        }
    }
}

/// `|L(u) − L(v)|` for binary specular labels.
pub fn pairwise_cost(specular_u: bool, specular_v: bool) -> f64 {
    (specular_u != specular_v) as u8 as f64
}

/// Surface gradients `(p, q) = (−n_x / n_z, −n_y / n_z)` with `n_z` clamped
/// from below.
pub fn surface_gradient(n: &Vector3<f64>) -> (f64, f64) {
    let nz = n.z.max(NZ_CLAMP);
    (-n.x / nz, -n.y / nz)
}

/// Discrete curl `|(p(w) − p(u)) − (q(v) − q(u))|` at `u`, with `v` the right
/// and `w` the lower neighbour.
pub fn ternary_cost(nu: &Vector3<f64>, nv: &Vector3<f64>, nw: &Vector3<f64>) -> f64 {
    let (pu, qu) = surface_gradient(nu);
    let (_, qv) = surface_gradient(nv);
    let (pw, _) = surface_gradient(nw);
    ((pw - pu) - (qv - qu)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn z() -> Vector3<f64> {
        Vector3::z()
    }

    #[test]
    fn unary_values() {
        let w = MrfWeights::default();
        let d = ReflectanceKind::Diffuse;
        let s = ReflectanceKind::Specular;
        assert_relative_eq!(unary_cost(&z(), Some(&z()), false, d, &w), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(unary_cost(&z(), Some(&z()), true, d, &w), 3.678794411714423, epsilon = 1e-12);
        assert_relative_eq!(unary_cost(&z(), Some(&z()), false, s, &w), 3.678794411714423, epsilon = 1e-12);
        assert_relative_eq!(unary_cost(&z(), Some(&Vector3::x()), false, d, &w), 1.0);
        assert_eq!(unary_cost(&z(), None, false, d, &w), 1.0);
        assert_relative_eq!(unary_cost(&z(), None, true, d, &w), 10.0, epsilon = 1e-12);
        let literal = MrfWeights {
            mismatch: MismatchRule::Multiply,
            ..w
        };
        assert_relative_eq!(unary_cost(&z(), Some(&z()), true, d, &literal), 0.036787944117144, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_values() {
        assert_eq!(pairwise_cost(false, false), 0.0);
        assert_eq!(pairwise_cost(false, true), 1.0);
        assert_eq!(pairwise_cost(true, false), 1.0);
        assert_eq!(pairwise_cost(true, true), 0.0);
    }

    #[test]
    fn curl_of_tilted_neighbours() {
        let t = 10f64.to_radians();
        let (s, c) = t.sin_cos();
        let v = Vector3::new(s, 0.0, c);
        let w = Vector3::new(0.0, s, c);
        assert!(ternary_cost(&z(), &v, &w) < 1e-15);
        // an x tilt below u gives p(w) − p(u) = −tan t while q(v) − q(u) = 0
        assert_relative_eq!(ternary_cost(&z(), &v, &v), t.tan(), epsilon = 1e-15);
    }

    #[test]
    fn clamp_bounds_grazing_normals() {
        let g = Vector3::new(1.0, 0.0, 0.0);
        let (p, _) = surface_gradient(&g);
        assert_relative_eq!(p, -1.0 / NZ_CLAMP);
    }

    #[test]
    fn saturation_mask() {
        let iun = ScalarMap::from_fn(4, 1, 0.0, |x, _| Some([0.5, 0.97, 0.98, 1.0][x]));
        let m = initial_specular_mask(&iun, 0.98, 1.0);
        assert_eq!(m.as_slice(), &[false, false, true, true]);
        let half = ScalarMap::filled(3, 3, 0.5);
        assert_eq!(initial_specular_mask(&half, 0.98, 1.0).count(), 0);
    }

    proptest! {
        #[test]
        fn planar_gradient_fields_have_zero_curl(a in -0.8f64..0.8, b in -0.8f64..0.8) {
            let n = Vector3::new(-a, -b, 1.0).normalize();
            prop_assert!(ternary_cost(&n, &n, &n) < 1e-12);
        }

        #[test]
        fn unary_is_within_exponential_bounds(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let n = Vector3::new(x, y, 1.0).normalize();
            let c = unary_cost(&n, Some(&z()), false, ReflectanceKind::Diffuse, &MrfWeights::default());
            prop_assert!(c >= (-1.0f64).exp() - 1e-15 && c <= 1.0 + 1e-15);
        }
    }
}
