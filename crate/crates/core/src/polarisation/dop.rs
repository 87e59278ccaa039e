//! Fresnel degree-of-polarisation models for dielectrics and their inverses.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Refractive index of a dielectric, strictly greater than one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RefractiveIndex(f64);

impl RefractiveIndex {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 1.0 && eta.is_finite()) {
            return Err(Error::OutOfDomain(format!("refractive index {eta}")));
        }
        Ok(Self(eta))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// Brewster angle `atan(η)`, where specular polarisation is complete.
    pub fn brewster(self) -> f64 {
        self.0.atan()
    }
}

impl TryFrom<f64> for RefractiveIndex {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RefractiveIndex> for f64 {
    fn from(v: RefractiveIndex) -> f64 {
        v.0
    }
}

fn check_zenith(theta: f64) -> Result<()> {
    if !(0.0..=FRAC_PI_2).contains(&theta) {
        return Err(Error::OutOfDomain(format!("zenith angle {theta} rad")));
    }
    Ok(())
}

fn dop_diffuse_raw(theta: f64, eta: f64) -> f64 {
    let s2 = theta.sin().powi(2);
    let a = eta - 1.0 / eta;
    let b = eta + 1.0 / eta;
    let num = a * a * s2;
    let den = 2.0 + 2.0 * eta * eta - b * b * s2 + 4.0 * theta.cos() * (eta * eta - s2).sqrt();
    num / den
}

/// Degree of polarisation of diffusely reflected light at zenith angle
/// `theta`. At `π/2` the limit value is returned.
pub fn dop_diffuse(theta: f64, eta: RefractiveIndex) -> Result<f64> {
    check_zenith(theta)?;
    Ok(dop_diffuse_raw(theta, eta.get()))
}

/// Largest attainable diffuse degree of polarisation, reached at grazing
/// view: `(η - 1/η) / (η + 1/η)`.
pub fn max_dop_diffuse(eta: RefractiveIndex) -> f64 {
    let e = eta.get();
    (e - 1.0 / e) / (e + 1.0 / e)
}

/// Result of inverting a degree of polarisation whose input may have been
/// clamped into the model's range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffuseZenith {
    pub cos_theta: f64,
    /// The input exceeded the diffuse maximum and was clamped.
    pub clamped: bool,
}

/// Closed-form cosine of the zenith angle from a diffuse degree of
/// polarisation.
pub fn invert_dop_diffuse(rho: f64, eta: RefractiveIndex) -> Result<DiffuseZenith> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::OutOfDomain(format!("degree of polarisation {rho}")));
    }
    let max = max_dop_diffuse(eta);
    let clamped = rho > max;
    let r = rho.min(max);
    let e = eta.get();
    let e2 = e * e;
    let e4 = e2 * e2;
    let r2 = r * r;
    let num = e4 * (1.0 - r2) + 2.0 * e2 * (2.0 * r2 + r - 1.0) + r2 + 2.0 * r
        - 4.0 * e2 * e * r * (1.0 - r2).sqrt()
        + 1.0;
    let den = (r + 1.0).powi(2) * (e4 + 1.0) + 2.0 * e2 * (3.0 * r2 + 2.0 * r - 1.0);
    let cos_theta = (num / den).max(0.0).sqrt().min(1.0);
    Ok(DiffuseZenith { cos_theta, clamped })
}

fn dop_specular_raw(theta: f64, eta: f64) -> f64 {
    let s = theta.sin();
    let s2 = s * s;
    let e2 = eta * eta;
    let num = 2.0 * s2 * theta.cos() * (e2 - s2).sqrt();
    let den = e2 - s2 - e2 * s2 + 2.0 * s2 * s2;
    num / den
}

/// Degree of polarisation of specularly reflected light at zenith angle
/// `theta`; equals one at the Brewster angle.
pub fn dop_specular(theta: f64, eta: RefractiveIndex) -> Result<f64> {
    check_zenith(theta)?;
    Ok(dop_specular_raw(theta, eta.get()))
}

/// The two zenith angles producing a given specular degree of polarisation,
/// one either side of the Brewster angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecularZenith {
    pub theta_lo: f64,
    pub theta_hi: f64,
    /// The input exceeded one and was clamped.
    pub clamped: bool,
}

impl SpecularZenith {
    pub fn cos_lo(&self) -> f64 {
        self.theta_lo.cos()
    }

    pub fn cos_hi(&self) -> f64 {
        self.theta_hi.cos()
    }
}

const BISECTION_TOL: f64 = 1e-12;
const BISECTION_MAX_ITERS: usize = 200;

/// Root of `f(θ) = target` on `[lo, hi]` for `f` monotone on the interval.
fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64, increasing: bool) -> f64 {
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let above = f(mid) > target;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Both zenith roots of the specular model by bisection on either side of
/// the Brewster angle.
pub fn invert_dop_specular(rho: f64, eta: RefractiveIndex) -> Result<SpecularZenith> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::OutOfDomain(format!("degree of polarisation {rho}")));
    }
    let clamped = rho > 1.0;
    let r = rho.min(1.0);
    let e = eta.get();
    let tb = eta.brewster();
    if r >= 1.0 {
        return Ok(SpecularZenith {
            theta_lo: tb,
            theta_hi: tb,
            clamped,
        });
    }
    let f = |t: f64| dop_specular_raw(t, e);
    let theta_lo = bisect(f, r, 0.0, tb, true);
    let theta_hi = bisect(f, r, tb, FRAC_PI_2, false);
    Ok(SpecularZenith {
        theta_lo,
        theta_hi,
        clamped,
    })
}

/// Which reflectance component dominates a pixel's polarisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectanceKind {
    Diffuse,
    Specular,
}

/// Dominance rule: diffuse unless the specular polarised amplitude strictly
/// exceeds the diffuse one.
pub fn dominance(i_d: f64, rho_d: f64, i_s: f64, rho_s: f64) -> ReflectanceKind {
    if i_s * rho_s > i_d * rho_d {
        ReflectanceKind::Specular
    } else {
        ReflectanceKind::Diffuse
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eta(v: f64) -> RefractiveIndex {
        RefractiveIndex::new(v).unwrap()
    }

    /// Fresnel amplitude coefficients evaluated directly from Snell's law,
    /// independent of the closed-form degree-of-polarisation formulas.
    fn fresnel_rs_rp(theta_i: f64, n1: f64, n2: f64) -> (f64, f64) {
        let st = n1 / n2 * theta_i.sin();
        let tt = st.asin();
        let (ci, ct) = (theta_i.cos(), tt.cos());
        let rs = (n1 * ci - n2 * ct) / (n1 * ci + n2 * ct);
        let rp = (n2 * ci - n1 * ct) / (n2 * ci + n1 * ct);
        (rs, rp)
    }

    /// Diffuse light refracts out of the surface; its polarisation is set by
    /// the transmission coefficients from inside the medium. Solving Snell's
    /// law gives the internal angle for an external zenith `theta`.
    fn diffuse_oracle(theta: f64, e: f64) -> f64 {
        let ti = (theta.sin() / e).asin();
        let (rs, rp) = fresnel_rs_rp(ti, e, 1.0);
        let (ts, tp) = (1.0 - rs * rs, 1.0 - rp * rp);
        (tp - ts) / (tp + ts)
    }

    fn specular_oracle(theta: f64, e: f64) -> f64 {
        let (rs, rp) = fresnel_rs_rp(theta, 1.0, e);
        let (rs2, rp2) = (rs * rs, rp * rp);
        (rs2 - rp2) / (rs2 + rp2)
    }

    #[test]
    fn diffuse_matches_fresnel_transmission_oracle() {
        for &e in &[1.3, 1.4, 1.5, 1.8] {
            // the oracle's arcsine loses precision right at grazing view
            for i in 0..=200 {
                let t = i as f64 / 200.0 * (FRAC_PI_2 - 1e-3);
                let got = dop_diffuse(t, eta(e)).unwrap();
                assert!((got - diffuse_oracle(t, e)).abs() < 1e-12, "eta {e} theta {t}");
            }
        }
        let t = 45f64.to_radians();
        assert!((dop_diffuse(t, eta(1.4)).unwrap() - diffuse_oracle(t, 1.4)).abs() < 1e-12);
    }

    #[test]
    fn specular_matches_fresnel_reflection_oracle() {
        for &e in &[1.3, 1.4, 1.5, 1.8] {
            for i in 1..200 {
                let t = i as f64 / 200.0 * FRAC_PI_2;
                let got = dop_specular(t, eta(e)).unwrap();
                assert!((got - specular_oracle(t, e)).abs() < 1e-12, "eta {e} theta {t}");
            }
        }
    }

    #[test]
    fn diffuse_zero_at_normal_incidence_and_monotone() {
        let e = eta(1.4);
        assert_eq!(dop_diffuse(0.0, e).unwrap(), 0.0);
        let n = 10_000;
        let mut prev = -1.0;
        for i in 0..n {
            let t = i as f64 / n as f64 * FRAC_PI_2;
            let v = dop_diffuse(t, e).unwrap();
            assert!(v > prev);
            assert!((0.0..1.0).contains(&v));
            prev = v;
        }
        let limit = dop_diffuse(FRAC_PI_2, e).unwrap();
        assert!((limit - max_dop_diffuse(e)).abs() < 1e-15);
        assert!(dop_diffuse(1.6, e).is_err());
        assert!(dop_diffuse(-0.1, e).is_err());
    }

    #[test]
    fn diffuse_inversion_identity_at_zero() {
        let r = invert_dop_diffuse(0.0, eta(1.4)).unwrap();
        assert!((r.cos_theta - 1.0).abs() < 1e-15);
        assert!(!r.clamped);
    }

    #[test]
    fn diffuse_inversion_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let t = rng.random_range(0.0..FRAC_PI_2 - 1e-3);
            let e = eta(1.4);
            let rho = dop_diffuse(t, e).unwrap();
            let c = invert_dop_diffuse(rho, e).unwrap().cos_theta;
            assert!((c - t.cos()).abs() < 1e-9, "theta {t}");
        }
    }

    #[test]
    fn diffuse_inversion_agrees_with_bisection() {
        let e = eta(1.4);
        let c = invert_dop_diffuse(0.3, e).unwrap();
        let t = bisect(|t| dop_diffuse_raw(t, 1.4), 0.3, 0.0, FRAC_PI_2, true);
        assert!((c.cos_theta.acos() - t).abs() < 1e-9);
    }

    #[test]
    fn diffuse_inversion_clamps_above_maximum() {
        let e = eta(1.4);
        let r = invert_dop_diffuse(0.9, e).unwrap();
        assert!(r.clamped);
        assert!(r.cos_theta.abs() < 1e-7);
        assert!(invert_dop_diffuse(-0.1, e).is_err());
    }

    #[test]
    fn specular_brewster_and_limits() {
        for &e in &[1.3, 1.4, 1.5, 1.8] {
            let v = dop_specular(eta(e).brewster(), eta(e)).unwrap();
            assert!((v - 1.0).abs() < 1e-9);
        }
        assert!((54.46 - 1.4f64.atan().to_degrees()).abs() < 0.01);
        assert_eq!(dop_specular(0.0, eta(1.4)).unwrap(), 0.0);
        assert!(dop_specular(1e-4, eta(1.4)).unwrap() < 1e-7);
    }

    #[test]
    fn specular_is_unimodal() {
        let e = eta(1.4);
        let n = 10_000;
        let vals: Vec<f64> = (1..n)
            .map(|i| dop_specular(i as f64 / n as f64 * FRAC_PI_2, e).unwrap())
            .collect();
        let diffs: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
        let changes = diffs.windows(2).filter(|d| (d[0] > 0.0) != (d[1] > 0.0)).count();
        assert_eq!(changes, 1);
    }

    #[test]
    fn specular_inversion_branches() {
        let e = eta(1.4);
        let r = invert_dop_specular(1.0, e).unwrap();
        assert_eq!(r.theta_lo, e.brewster());
        assert_eq!(r.theta_hi, e.brewster());
        let r = invert_dop_specular(0.5, e).unwrap();
        assert!(r.theta_lo < e.brewster() && r.theta_hi > e.brewster());
        for t in [r.theta_lo, r.theta_hi] {
            assert!((dop_specular(t, e).unwrap() - 0.5).abs() < 1e-10);
        }
        let r = invert_dop_specular(1.2, e).unwrap();
        assert!(r.clamped);
        assert!(!invert_dop_specular(0.0, e).unwrap().clamped);
    }

    #[test]
    fn dominance_rule() {
        assert_eq!(dominance(0.5, 0.1, 0.0, 0.9), ReflectanceKind::Diffuse);
        assert_eq!(dominance(0.0, 0.1, 0.2, 0.3), ReflectanceKind::Specular);
        assert_eq!(dominance(0.5, 0.2, 0.2, 0.5), ReflectanceKind::Diffuse);
    }

    #[test]
    fn refractive_index_rejects_non_dielectric() {
        assert!(RefractiveIndex::new(1.0).is_err());
        assert!(RefractiveIndex::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<RefractiveIndex>("0.9").is_err());
        assert_eq!(serde_json::from_str::<RefractiveIndex>("1.5").unwrap().get(), 1.5);
    }

    proptest! {
        #[test]
        fn specular_roundtrip_per_branch(t in 1e-3..(FRAC_PI_2 - 1e-3), e in 1.2f64..2.0) {
            let n = eta(e);
            let rho = dop_specular(t, n).unwrap();
            let r = invert_dop_specular(rho, n).unwrap();
            let got = if t <= n.brewster() { r.theta_lo } else { r.theta_hi };
            // the specular curve is flat at the Brewster peak, so the angle is
            // only as well determined as the residual allows there
            let slope = (dop_specular((t + 1e-6).min(FRAC_PI_2), n).unwrap() - rho).abs() / 1e-6;
            prop_assume!(slope > 1e-2);
            prop_assert!((got - t).abs() < 1e-8);
            prop_assert!((dop_specular(got, n).unwrap() - rho).abs() < 1e-10);
        }

        #[test]
        fn diffuse_roundtrip_any_eta(t in 0.0..(FRAC_PI_2 - 1e-3), e in 1.2f64..2.0) {
            let n = eta(e);
            let c = invert_dop_diffuse(dop_diffuse(t, n).unwrap(), n).unwrap().cos_theta;
            prop_assert!((c - t.cos()).abs() < 1e-9);
        }
    }
}
