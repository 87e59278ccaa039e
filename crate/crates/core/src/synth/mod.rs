//! Ground-truth scenes: pinhole renders of an analytic sphere or a triangle
//! mesh with Blinn-Phong shading, surface albedo, simulated polarisation and
//! a second view, plus seeded Gaussian sensor noise.
//!
//! Lengths are metres. Both cameras share the light direction and the
//! normal orientation of [`crate::camera`].

pub mod mesh;

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::albedo::LightSource;
use crate::camera::{CameraIntrinsics, StereoRig};
use crate::error::{Error, Result};
use crate::image::{Map, Mask, ScalarMap, VectorMap};
use crate::io::read_intensity;
use crate::polarisation::{
    canonical_phase, dominance, dop_diffuse, dop_specular, simulate_polariser_stack, ReflectanceKind,
    RefractiveIndex,
};
pub use mesh::TriangleMesh;

/// Near and far depth of the reference object, metres.
pub const REFERENCE_DEPTH_RANGE: (f64, f64) = (0.07233, 0.09009);

/// Centre distance and radius of a sphere on the optical axis whose visible
/// depth runs from `near` (nearest point) to `far` (silhouette).
pub fn sphere_for_depth_range(near: f64, far: f64) -> (f64, f64) {
    // far = (d² − r²)/d with r = d − near
    let d = near * near / (2.0 * near - far);
    (d, d - near)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceConfig {
    Sphere {
        centre: [f64; 3],
        radius: f64,
    },
    /// OBJ mesh placed by `p ↦ scale·p + translation`.
    Mesh {
        path: PathBuf,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        translation: [f64; 3],
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlbedoSource {
    Constant {
        value: f64,
    },
    /// `low` where the surface point's `x` is below `split_x` (default: the
    /// surface centre), `high` elsewhere.
    TwoTone {
        low: f64,
        high: f64,
        #[serde(default)]
        split_x: Option<f64>,
    },
    /// Piecewise-constant 3D Voronoi cells with seeded sites and values.
    Cells {
        count: usize,
        low: f64,
        high: f64,
    },
    /// Greyscale image projected onto the surface from the left camera,
    /// mapped linearly to `[low, high]`.
    Texture {
        path: PathBuf,
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalPoints {
    pub left: [f64; 2],
    pub right_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels, both axes and both cameras.
    pub focal: f64,
    pub baseline: f64,
    /// Principal points; by default they are shifted so the surface centre
    /// images near the middle of both views.
    pub principal: Option<PrincipalPoints>,
    pub surface: SurfaceConfig,
    pub albedo: AlbedoSource,
    pub light: LightSource,
    pub eta: RefractiveIndex,
    pub ks: f64,
    pub shininess: f64,
    /// Noise standard deviation as a fraction of `full_range`.
    pub noise: f64,
    pub angles_deg: Vec<f64>,
    pub seed: u64,
    /// Sensor full range; rendered images are clipped to `[0, full_range]`.
    pub full_range: f64,
    /// Unpolarised background intensity.
    pub background: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let baseline = 0.05;
        let (d, r) = sphere_for_depth_range(REFERENCE_DEPTH_RANGE.0, REFERENCE_DEPTH_RANGE.1);
        Self {
            width: 256,
            height: 256,
            focal: 300.0,
            baseline,
            principal: None,
            surface: SurfaceConfig::Sphere {
                centre: [baseline / 2.0, 0.0, d],
                radius: r,
            },
            albedo: AlbedoSource::Cells {
                count: 3000,
                low: 0.3,
                high: 0.8,
            },
            light: LightSource::new(Vector3::z()).expect("unit light"),
            eta: RefractiveIndex::new(1.4).expect("valid index"),
            ks: 0.3,
            shininess: 50.0,
            noise: 0.0,
            angles_deg: vec![0.0, 45.0, 90.0, 135.0],
            seed: 0,
            full_range: 1.0,
            background: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("image size {}×{} is too small", self.width, self.height));
        }
        if !(self.focal > 0.0 && self.baseline > 0.0) {
            return bad("focal length and baseline must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if self.angles_deg.len() < 3 {
            return bad("at least 3 polariser angles are required".into());
        }
        if !(self.full_range > 0.0 && self.ks >= 0.0 && self.shininess > 0.0 && self.background >= 0.0) {
            return bad("full range, ks, shininess and background must be positive".into());
        }
        match &self.surface {
            SurfaceConfig::Sphere { radius, centre } if !(*radius > 0.0 && centre[2] > *radius) => {
                return bad("sphere must have positive radius and lie in front of the camera".into())
            }
            _ => {}
        }
        match self.albedo {
            AlbedoSource::Constant { value } if !(0.0..=1.0).contains(&value) => {
                return bad(format!("albedo {value} outside [0, 1]"))
            }
            AlbedoSource::TwoTone { low, high, .. }
            | AlbedoSource::Cells { low, high, .. }
            | AlbedoSource::Texture { low, high, .. }
                if !((0.0..=1.0).contains(&low) && (0.0..=1.0).contains(&high)) =>
            {
                return bad(format!("albedo range [{low}, {high}] outside [0, 1]"))
            }
            AlbedoSource::Cells { count: 0, .. } => return bad("albedo cells need at least one site".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        self.angles_deg.iter().map(|a| a.to_radians()).collect()
    }
}

enum Shape {
    Sphere { centre: Point3<f64>, radius: f64 },
    Mesh(TriangleMesh),
}

impl Shape {
    fn load(cfg: &SurfaceConfig) -> Result<Self> {
        Ok(match cfg {
            SurfaceConfig::Sphere { centre, radius } => Shape::Sphere {
                centre: Point3::from(*centre),
                radius: *radius,
            },
            SurfaceConfig::Mesh {
                path,
                scale,
                translation,
            } => Shape::Mesh(TriangleMesh::load_obj(path)?.transformed(*scale, Vector3::from(*translation))?),
        })
    }

    fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        match self {
            Shape::Sphere { centre, radius } => (centre - Vector3::repeat(*radius), centre + Vector3::repeat(*radius)),
            Shape::Mesh(m) => m.bounds(),
        }
    }

    /// Centre and a representative visible depth for framing.
    fn framing(&self) -> (Point3<f64>, f64) {
        match self {
            Shape::Sphere { centre, radius } => {
                let d = centre.coords.norm();
                let near = d - radius;
                let far = (d * d - radius * radius) / d;
                (*centre, 0.5 * (near + far))
            }
            Shape::Mesh(m) => {
                let (lo, hi) = m.bounds();
                let c = Point3::from((lo.coords + hi.coords) / 2.0);
                (c, lo.z.max(1e-9))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    depth: f64,
    point: Point3<f64>,
    /// Unit normal with `n · v ≥ 0`.
    normal: Vector3<f64>,
    view: Vector3<f64>,
}

/// Traces every pixel of `cam` placed at `origin` (axes parallel to the
/// left camera).
fn trace(shape: &Shape, cam: &CameraIntrinsics, origin: Point3<f64>) -> Vec<Option<Hit>> {
    let (w, h) = cam.dims();
    let finish = |x: usize, y: usize, t: f64, n: Vector3<f64>| {
        let dir = cam.ray(x as f64, y as f64);
        let view = dir.normalize();
        let n = n.normalize();
        let n = if n.dot(&view) < 0.0 { -n } else { n };
        Hit {
            depth: t,
            point: origin + dir * t,
            normal: n,
            view,
        }
    };
    match shape {
        Shape::Sphere { centre, radius } => (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let d = cam.ray(x as f64, y as f64);
                let oc = origin - centre;
                let a = d.dot(&d);
                let b = d.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let p = origin + d * t;
                Some(finish(x, y, t, centre - p))
            })
            .collect(),
        Shape::Mesh(m) => {
            // z-buffer over per-triangle bounding boxes
            let mut best: Vec<Option<(f64, usize, f64, f64)>> = vec![None; w * h];
            for (fi, f) in m.faces.iter().enumerate() {
                let [a, b, c] = f.map(|i| m.vertices[i]);
                if [a, b, c].iter().any(|p| p.z - origin.z <= 0.0) {
                    continue;
                }
                let proj = |p: &Point3<f64>| cam.project(&Point3::from(p - origin.coords));
                let pts = [proj(&a), proj(&b), proj(&c)];
                let x_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
                let y_lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
                let x_hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
                let y_hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
                if x_hi < 0.0 || y_hi < 0.0 {
                    continue;
                }
                let (x_hi, y_hi) = ((x_hi as usize).min(w - 1), (y_hi as usize).min(h - 1));
                for y in y_lo..=y_hi {
                    for x in x_lo..=x_hi {
                        let d = cam.ray(x as f64, y as f64);
                        if let Some((t, u, v)) = mesh::intersect_triangle(&origin, &d, &a, &b, &c) {
                            let slot = &mut best[y * w + x];
                            if slot.is_none_or(|(bt, ..)| t < bt) {
                                *slot = Some((t, fi, u, v));
                            }
                        }
                    }
                }
            }
            best.into_iter()
                .enumerate()
                .map(|(i, b)| {
                    let (t, fi, u, v) = b?;
                    let f = m.faces[fi];
                    let mut n = m.normals[f[0]] * (1.0 - u - v) + m.normals[f[1]] * u + m.normals[f[2]] * v;
                    if n.norm() < 1e-12 {
                        let [a, b, c] = f.map(|k| m.vertices[k]);
                        n = (b - a).cross(&(c - a));
                    }
                    Some(finish(i % w, i / w, t, n))
                })
                .collect()
        }
    }
}

/// Surface albedo as a function of the 3D point (left-camera frame).
struct AlbedoField {
    source: AlbedoSource,
    split: f64,
    sites: Vec<(Point3<f64>, f64)>,
    texture: Option<ScalarMap>,
    left: CameraIntrinsics,
}

impl AlbedoField {
    fn new(cfg: &SceneConfig, shape: &Shape, left: CameraIntrinsics) -> Result<Self> {
        let (lo, hi) = shape.bounds();
        let mut sites = Vec::new();
        let mut texture = None;
        let mut split = 0.5 * (lo.x + hi.x);
        match &cfg.albedo {
            AlbedoSource::Cells { count, low, high } => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(u64::MAX);
                for _ in 0..*count {
                    let p = Point3::new(
                        rng.random_range(lo.x..=hi.x),
                        rng.random_range(lo.y..=hi.y),
                        rng.random_range(lo.z..=hi.z),
                    );
                    sites.push((p, rng.random_range(*low..=*high)));
                }
            }
            AlbedoSource::TwoTone { split_x: Some(s), .. } => split = *s,
            AlbedoSource::Texture { path, .. } => texture = Some(read_intensity(path)?),
            _ => {}
        }
        Ok(Self {
            source: cfg.albedo.clone(),
            split,
            sites,
            texture,
            left,
        })
    }

    fn at(&self, p: &Point3<f64>) -> f64 {
        match self.source {
            AlbedoSource::Constant { value } => value,
            AlbedoSource::TwoTone { low, high, .. } => {
                if p.x < self.split {
                    low
                } else {
                    high
                }
            }
            AlbedoSource::Cells { .. } => {
                let mut best = (f64::INFINITY, 0.0);
                for (s, v) in &self.sites {
                    let d = (s - p).norm_squared();
                    if d < best.0 {
                        best = (d, *v);
                    }
                }
                best.1
            }
            AlbedoSource::Texture { low, high, .. } => {
                let tex = self.texture.as_ref().expect("texture loaded");
                let (u, v) = self.left.project(p);
                let tx = ((u / self.left.width as f64) * tex.width() as f64).floor();
                let ty = ((v / self.left.height as f64) * tex.height() as f64).floor();
                let tx = tx.clamp(0.0, (tex.width() - 1) as f64) as usize;
                let ty = ty.clamp(0.0, (tex.height() - 1) as f64) as usize;
                low + (high - low) * tex.get(tx, ty).clamp(0.0, 1.0)
            }
        }
    }
}

/// Noiseless rendered scene and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub rig: StereoRig,
    pub light: LightSource,
    pub eta: RefractiveIndex,
    pub foreground: Mask,
    /// Metric depth on the foreground.
    pub depth: ScalarMap,
    pub normals: VectorMap,
    pub albedo: ScalarMap,
    pub i_d: ScalarMap,
    pub i_s: ScalarMap,
    pub rho_d: ScalarMap,
    pub rho_s: ScalarMap,
    /// Ground-truth reflectance dominance (set where specular dominates).
    pub dominance: Mask,
    /// Polarisation parameters valid on the whole frame (background is
    /// unpolarised).
    pub iun: ScalarMap,
    pub rho: ScalarMap,
    pub phi: ScalarMap,
    /// Unpolarised intensity seen by the right camera.
    pub right: ScalarMap,
}

/// Rig used for a configuration, with automatic principal points unless set.
pub fn scene_rig(cfg: &SceneConfig) -> Result<StereoRig> {
    let shape = Shape::load(&cfg.surface)?;
    rig_for(cfg, &shape)
}

fn rig_for(cfg: &SceneConfig, shape: &Shape) -> Result<StereoRig> {
    let (w, h, f) = (cfg.width, cfg.height, cfg.focal);
    let (left0, right_x) = match cfg.principal {
        Some(p) => (p.left, p.right_x),
        None => {
            let (c, z) = shape.framing();
            let cx = w as f64 / 2.0;
            let x0 = cx - f * c.x / z;
            let y0 = h as f64 / 2.0 - f * c.y / z;
            ([x0, y0], cx - f * (c.x - cfg.baseline) / z)
        }
    };
    let left = CameraIntrinsics::new(f, f, left0[0], left0[1], w, h)?;
    let right = CameraIntrinsics::new(f, f, right_x, left0[1], w, h)?;
    StereoRig::new(left, right, cfg.baseline)
}

fn blinn_phong(cfg: &SceneConfig, n: &Vector3<f64>, view: &Vector3<f64>) -> f64 {
    let s = cfg.light.direction();
    let half = (s + view).normalize();
    cfg.ks * n.dot(&half).max(0.0).powf(cfg.shininess)
}

/// Renders both views and the ground truth.
pub fn render(cfg: &SceneConfig) -> Result<SceneTruth> {
    cfg.validate()?;
    let shape = Shape::load(&cfg.surface)?;
    let rig = rig_for(cfg, &shape)?;
    let albedo_field = AlbedoField::new(cfg, &shape, rig.left)?;
    let (w, h) = (cfg.width, cfg.height);
    let left_hits = trace(&shape, &rig.left, Point3::origin());
    if left_hits.iter().all(Option::is_none) {
        return Err(Error::NoForeground);
    }
    let s = cfg.light.direction();

    let map = |f: &dyn Fn(&Hit) -> f64| {
        let mask: Vec<bool> = left_hits.iter().map(Option::is_some).collect();
        let data = left_hits.iter().map(|h| h.as_ref().map_or(0.0, f)).collect();
        Map::from_parts(w, h, data, mask)
    };
    let depth = map(&|h| h.depth)?;
    let albedo = map(&|h| albedo_field.at(&h.point))?;
    let i_d = map(&|h| albedo_field.at(&h.point) * h.normal.dot(&s).max(0.0))?;
    let i_s = map(&|h| blinn_phong(cfg, &h.normal, &h.view))?;
    let zenith = |h: &Hit| h.normal.dot(&h.view).clamp(0.0, 1.0).acos().min(FRAC_PI_2);
    let rho_d = map(&|h| dop_diffuse(zenith(h), cfg.eta).expect("zenith in range"))?;
    let rho_s = map(&|h| dop_specular(zenith(h), cfg.eta).expect("zenith in range"))?;
    let normals = Map::from_parts(
        w,
        h,
        left_hits.iter().map(|h| h.map_or(Vector3::zeros(), |h| h.normal)).collect(),
        left_hits.iter().map(Option::is_some).collect(),
    )?;
    let foreground = depth.mask();

    let mut dom = Mask::new(w, h, false);
    let mut iun = ScalarMap::filled(w, h, cfg.background);
    let mut rho = ScalarMap::filled(w, h, 0.0);
    let mut phi = ScalarMap::filled(w, h, 0.0);
    for (x, y, n) in normals.iter_valid() {
        let (d, sp) = (*i_d.get(x, y), *i_s.get(x, y));
        let (rd, rs) = (*rho_d.get(x, y), *rho_s.get(x, y));
        let total = d + sp;
        let kind = dominance(d, rd, sp, rs);
        let alpha = n.x.atan2(n.y);
        iun.set(x, y, total);
        rho.set(x, y, if total > 0.0 { (d * rd - sp * rs).abs() / total } else { 0.0 });
        match kind {
            ReflectanceKind::Diffuse => phi.set(x, y, canonical_phase(alpha)),
            ReflectanceKind::Specular => {
                dom.set(x, y, true);
                phi.set(x, y, canonical_phase(alpha - FRAC_PI_2));
            }
        }
    }

    let right_hits = trace(&shape, &rig.right, Point3::new(cfg.baseline, 0.0, 0.0));
    let right = ScalarMap::from_fn(w, h, 0.0, |x, y| {
        Some(match &right_hits[y * w + x] {
            Some(hit) => albedo_field.at(&hit.point) * hit.normal.dot(&s).max(0.0) + blinn_phong(cfg, &hit.normal, &hit.view),
            None => cfg.background,
        })
    });

    debug_assert!(phi.iter_valid().all(|(_, _, p)| (0.0..PI).contains(p)));
    Ok(SceneTruth {
        rig,
        light: cfg.light,
        eta: cfg.eta,
        foreground,
        depth,
        normals,
        albedo,
        i_d,
        i_s,
        rho_d,
        rho_s,
        dominance: dom,
        iun,
        rho,
        phi,
        right,
    })
}

/// Adds seeded noise from stream `stream` and clips to the sensor range.
fn sense(img: &ScalarMap, cfg: &SceneConfig, stream: u64) -> ScalarMap {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let sd = cfg.noise * cfg.full_range;
    let normal = Normal::new(0.0, sd.max(0.0)).expect("finite deviation");
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = if sd > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        *v = (*v + n).clamp(0.0, cfg.full_range);
    }
    out
}

/// Polariser images `(angle, image)` of the left camera, with noise.
pub fn polarise(truth: &SceneTruth, cfg: &SceneConfig) -> Result<Vec<(f64, ScalarMap)>> {
    let angles = cfg.angles();
    let clean = simulate_polariser_stack(&truth.iun, &truth.rho, &truth.phi, &angles)?;
    Ok(angles
        .iter()
        .zip(clean)
        .enumerate()
        .map(|(k, (&a, img))| (a, sense(&img, cfg, k as u64)))
        .collect())
}

/// Right-camera intensity image with noise.
pub fn right_view(truth: &SceneTruth, cfg: &SceneConfig) -> ScalarMap {
    sense(&truth.right, cfg, cfg.angles_deg.len() as u64)
}
