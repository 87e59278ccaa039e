//! Depth and surface-normal error metrics and the metrics CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::angle_between;
use crate::image::{ScalarMap, VectorMap};

/// Mean absolute depth error over the valid overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthError {
    /// Millimetres, for depth given in metres.
    pub mae_mm: f64,
    /// Scale applied to the estimate (1 without alignment).
    pub scale: f64,
    pub pixels: usize,
}

/// Mean `|s·est − gt|` in millimetres, with `s = ⟨est, gt⟩ / ⟨est, est⟩`
/// when `align_scale` is set and `s = 1` otherwise.
pub fn depth_mae(est: &ScalarMap, gt: &ScalarMap, align_scale: bool) -> Result<DepthError> {
    est.check_dims(gt.dims())?;
    let pairs: Vec<(f64, f64)> = est
        .iter_valid()
        .filter_map(|(x, y, &e)| gt.valid(x, y).map(|&g| (e, g)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let scale = if align_scale {
        let eg: f64 = pairs.iter().map(|(e, g)| e * g).sum();
        let ee: f64 = pairs.iter().map(|(e, _)| e * e).sum();
        if ee > 0.0 {
            eg / ee
        } else {
            1.0
        }
    } else {
        1.0
    };
    let sum: f64 = pairs.iter().map(|(e, g)| (scale * e - g).abs()).sum();
    Ok(DepthError {
        mae_mm: 1e3 * sum / pairs.len() as f64,
        scale,
        pixels: pairs.len(),
    })
}

/// Mean angle between normals in degrees over the valid overlap, and the
/// pixel count.
pub fn normal_mae(est: &VectorMap, gt: &VectorMap) -> Result<(f64, usize)> {
    est.check_dims(gt.dims())?;
    let mut sum = 0.0;
    let mut count = 0;
    for (x, y, e) in est.iter_valid() {
        if let Some(g) = gt.valid(x, y) {
            sum += angle_between(e, g).to_degrees();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok((sum / count as f64, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub metric: String,
    pub value: f64,
    pub unit: String,
    pub pixels: usize,
}

/// Ordered list of metrics, written as CSV with columns
/// `metric,value,unit,pixels`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<Metric>,
}

impl MetricsReport {
    pub fn push(&mut self, metric: impl Into<String>, value: f64, unit: impl Into<String>, pixels: usize) {
        self.metrics.push(Metric {
            metric: metric.into(),
            value,
            unit: unit.into(),
            pixels,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.value)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for m in &self.metrics {
            w.serialize(m)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let metrics = r.deserialize().collect::<std::result::Result<Vec<Metric>, _>>()?;
        Ok(Self { metrics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> ScalarMap {
        ScalarMap::from_fn(8, 6, 0.0, |x, y| Some(0.08 + 0.001 * x as f64 + 0.0005 * y as f64))
    }

    #[test]
    fn depth_examples() {
        let gt = ramp();
        assert_eq!(depth_mae(&gt, &gt, false).unwrap().mae_mm, 0.0);
        let doubled = gt.map(|z| 2.0 * z);
        let e = depth_mae(&doubled, &gt, true).unwrap();
        assert_relative_eq!(e.scale, 0.5, epsilon = 1e-15);
        assert!(e.mae_mm < 1e-12);
        let shifted = gt.map(|z| z + 1e-4);
        assert_relative_eq!(depth_mae(&shifted, &gt, false).unwrap().mae_mm, 0.1, epsilon = 1e-9);
        assert!(matches!(
            depth_mae(&ScalarMap::invalid(8, 6, 0.0), &gt, false),
            Err(Error::EmptyOverlap)
        ));
    }

    #[test]
    fn normal_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = VectorMap::from_fn(10, 10, Vector3::zeros(), |_, _| {
            Some(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize())
        });
        assert_eq!(normal_mae(&gt, &gt).unwrap().0, 0.0);
        let rotated = gt.map(|n| {
            let axis = Unit::new_normalize(n.cross(&Vector3::x()));
            Rotation3::from_axis_angle(&axis, 10f64.to_radians()) * n
        });
        assert_relative_eq!(normal_mae(&rotated, &gt).unwrap().0, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn normal_error_matches_acos_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut unit = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let a = VectorMap::from_fn(16, 16, Vector3::zeros(), |_, _| Some(unit()));
        let b = VectorMap::from_fn(16, 16, Vector3::zeros(), |_, _| Some(unit()));
        let oracle: f64 = a
            .iter_valid()
            .map(|(x, y, p)| p.dot(b.get(x, y)).clamp(-1.0, 1.0).acos().to_degrees())
            .sum::<f64>()
            / 256.0;
        assert!((normal_mae(&a, &b).unwrap().0 - oracle).abs() < 1e-9);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut r = MetricsReport::default();
        r.push("depth_mae", 0.25, "mm", 100);
        r.push("normal_mae", 3.5, "deg", 99);
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("metric,value,unit,pixels\n"));
        assert_eq!(MetricsReport::read_csv(&path).unwrap(), r);
        assert_eq!(r.get("normal_mae"), Some(3.5));
    }

    proptest! {
        #[test]
        fn alignment_never_hurts(s in 0.5f64..2.0, noise in 0.0f64..1e-3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = ramp();
            let est = gt.map(|z| s * z + rng.random_range(-noise..=noise));
            let aligned = depth_mae(&est, &gt, true).unwrap().mae_mm;
            let raw = depth_mae(&est, &gt, false).unwrap().mae_mm;
            prop_assert!(aligned <= raw + 1e-9);
        }

        #[test]
        fn normal_error_is_symmetric_and_bounded(ax in -1.0f64..1.0, ay in -1.0f64..1.0, bx in -1.0f64..1.0, bz in -1.0f64..1.0) {
            let a = VectorMap::filled(1, 1, Vector3::new(ax, ay, 0.5).normalize());
            let b = VectorMap::filled(1, 1, Vector3::new(bx, 0.3, bz).normalize());
            let (ab, _) = normal_mae(&a, &b).unwrap();
            let (ba, _) = normal_mae(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=180.0).contains(&ab));
        }
    }
}
