//! Global linear solve for per-pixel metric depth.
//!
//! Every constraint is linear in the un-normalised perspective normal
//! `n = N_op · Z`, with `N_op = [−fx·Dx; −fy·Dy; X·Dx + Y·Dy + I]`:
//!
//! - phase rows force the normal's image-plane projection onto the phase
//!   direction (one row per pixel),
//! - guide-normal rows `[n′]ₓ · n = 0` force collinearity with the
//!   disambiguated normals (three rows per pixel),
//! - shading rows `(a·cos θ·s − i_un·v) · n = 0` tie shading to the zenith
//!   angle from the degree of polarisation (one row per diffuse pixel).
//!
//! The stacked system `[λ·A·N_op; W] Z = [0; z_guide]` is anchored by the
//! stereo depth at every pixel where the guide is valid.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::albedo::LightSource;
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::geometry::{derivative_stencil, Axis, DifferenceScheme};
use crate::image::{Mask, ScalarMap, VectorMap};
use crate::polarisation::{invert_dop_diffuse, PolarisationImage, RefractiveIndex};
use crate::sparse::{norm, solve_least_squares, CsrMatrix, LsqOptions, LsqSolution};

/// Row-major bijection between foreground pixels and unknown indices, with
/// the diffuse/specular split.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelIndexing {
    width: usize,
    height: usize,
    mask: Mask,
    pixels: Vec<(usize, usize)>,
    index: Vec<usize>,
    specular: Vec<bool>,
}

impl PixelIndexing {
    pub fn new(foreground: &Mask, specular: &Mask) -> Result<Self> {
        if foreground.dims() != specular.dims() {
            return Err(Error::DimensionMismatch {
                expected: foreground.dims(),
                actual: specular.dims(),
            });
        }
        let (width, height) = foreground.dims();
        let mut index = vec![usize::MAX; width * height];
        let mut pixels = Vec::new();
        let mut spec = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if foreground.get(x, y) {
                    index[y * width + x] = pixels.len();
                    pixels.push((x, y));
                    spec.push(specular.get(x, y));
                }
            }
        }
        if pixels.is_empty() {
            return Err(Error::NoForeground);
        }
        Ok(Self {
            width,
            height,
            mask: foreground.clone(),
            pixels,
            index,
            specular: spec,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Number of unknowns `N`.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn n_diffuse(&self) -> usize {
        self.specular.iter().filter(|s| !**s).count()
    }

    pub fn n_specular(&self) -> usize {
        self.len() - self.n_diffuse()
    }

    pub fn pixel(&self, i: usize) -> (usize, usize) {
        self.pixels[i]
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn is_specular(&self, i: usize) -> bool {
        self.specular[i]
    }

    pub fn index_of(&self, x: usize, y: usize) -> Option<usize> {
        let i = *self.index.get(y * self.width + x)?;
        (i != usize::MAX).then_some(i)
    }

    /// Scatters per-unknown values into a map valid on the foreground.
    pub fn to_map(&self, values: &[f64]) -> ScalarMap {
        let mut out = ScalarMap::invalid(self.width, self.height, 0.0);
        for (&(x, y), &v) in self.pixels.iter().zip(values) {
            out.set(x, y, v);
        }
        out
    }

    /// Gathers map values at the unknowns; invalid pixels give `None`.
    pub fn gather(&self, map: &ScalarMap) -> Vec<Option<f64>> {
        self.pixels.iter().map(|&(x, y)| map.valid(x, y).copied()).collect()
    }
}

/// Removes pixels lacking a horizontal or a vertical foreground neighbour,
/// repeatedly, so the remainder supports derivatives along both axes.
pub fn prune_isolated(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    loop {
        let (w, h) = m.dims();
        let cur = m.clone();
        let has = |x: usize, y: usize, dx: isize, dy: isize| cur.get_signed(x as isize + dx, y as isize + dy);
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if cur.get(x, y) && !((has(x, y, 1, 0) || has(x, y, -1, 0)) && (has(x, y, 0, 1) || has(x, y, 0, -1))) {
                    m.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

/// The `3N × N` operator mapping depth to un-normalised normals, stacked as
/// `(n_x; n_y; n_z)`. Derivatives use the smoothed central stencil where the
/// neighbourhood allows.
pub fn build_normal_operator(cam: &CameraIntrinsics, idx: &PixelIndexing) -> Result<CsrMatrix> {
    let n = idx.len();
    let mask = idx.mask();
    let mut isolated = Vec::new();
    let mut rows_x = Vec::with_capacity(n);
    let mut rows_y = Vec::with_capacity(n);
    let mut rows_z = Vec::with_capacity(n);
    for (i, &(x, y)) in idx.pixels().iter().enumerate() {
        let sx = derivative_stencil(mask, x, y, Axis::X, DifferenceScheme::SmoothedCentral);
        let sy = derivative_stencil(mask, x, y, Axis::Y, DifferenceScheme::SmoothedCentral);
        let (Some(sx), Some(sy)) = (sx, sy) else {
            isolated.push((x, y));
            continue;
        };
        let col = |dx: isize, dy: isize| {
            idx.index_of((x as isize + dx) as usize, (y as isize + dy) as usize)
                .expect("stencil taps lie on the foreground")
        };
        let (xr, yr) = (x as f64 - cam.x0, y as f64 - cam.y0);
        rows_x.push(sx.taps().iter().map(|&(dx, dy, w)| (col(dx, dy), -cam.fx * w)).collect::<Vec<_>>());
        rows_y.push(sy.taps().iter().map(|&(dx, dy, w)| (col(dx, dy), -cam.fy * w)).collect::<Vec<_>>());
        let mut rz: Vec<(usize, f64)> = sx.taps().iter().map(|&(dx, dy, w)| (col(dx, dy), xr * w)).collect();
        rz.extend(sy.taps().iter().map(|&(dx, dy, w)| (col(dx, dy), yr * w)));
        rz.push((i, 1.0));
        rows_z.push(rz);
    }
    if !isolated.is_empty() {
        return Err(Error::IsolatedPixels(isolated));
    }
    rows_x.extend(rows_y);
    rows_x.extend(rows_z);
    CsrMatrix::from_rows(n, rows_x)
}

/// One phase row per unknown acting on `(n_x, n_y)`: `[cos φ, −sin φ, 0]`
/// for diffuse pixels, `[−sin φ, −cos φ, 0]` for specular ones. Pixels with
/// unreliable phase (low polarisation or no decomposition) get an empty row.
pub fn phase_rows(pol: &PolarisationImage, idx: &PixelIndexing) -> Result<CsrMatrix> {
    check_dims(idx, pol.dims())?;
    let n = idx.len();
    let rows = idx
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            if !pol.mask.get(x, y) || pol.low_polarisation.get(x, y) {
                return Vec::new();
            }
            let (s, c) = pol.phi.get(x, y).sin_cos();
            let (a, b) = if idx.is_specular(i) { (-s, -c) } else { (c, -s) };
            vec![(i, a), (n + i, b)]
        })
        .collect();
    CsrMatrix::from_rows(3 * n, rows)
}

/// Three rows per unknown realising `[n′]ₓ · n`. Pixels without `n′` get
/// empty rows.
pub fn guide_normal_rows(nprime: &VectorMap, idx: &PixelIndexing) -> Result<CsrMatrix> {
    check_dims(idx, nprime.dims())?;
    let n = idx.len();
    let mut rows = vec![Vec::new(); 3 * n];
    for (i, &(x, y)) in idx.pixels().iter().enumerate() {
        let Some(m) = nprime.valid(x, y) else { continue };
        let (cx, cy, cz) = (i, n + i, 2 * n + i);
        rows[3 * i] = vec![(cy, -m.z), (cz, m.y)];
        rows[3 * i + 1] = vec![(cx, m.z), (cz, -m.x)];
        rows[3 * i + 2] = vec![(cx, -m.y), (cy, m.x)];
    }
    CsrMatrix::from_rows(3 * n, rows)
}

/// One row per diffuse unknown, `(a·cos θ·s − i_un·v) · n = 0` with `cos θ`
/// from the diffuse degree of polarisation, divided by `a·cos θ + i_un` so
/// its scale is independent of the intensity units.
pub fn shading_rows(
    pol: &PolarisationImage,
    albedo: &ScalarMap,
    light: &LightSource,
    eta: RefractiveIndex,
    cam: &CameraIntrinsics,
    idx: &PixelIndexing,
) -> Result<CsrMatrix> {
    check_dims(idx, pol.dims())?;
    check_dims(idx, albedo.dims())?;
    let n = idx.len();
    let s = light.direction();
    let mut rows = Vec::with_capacity(idx.n_diffuse());
    for (i, &(x, y)) in idx.pixels().iter().enumerate() {
        if idx.is_specular(i) {
            continue;
        }
        let (Some(&a), true) = (albedo.valid(x, y), pol.mask.get(x, y)) else {
            rows.push(Vec::new());
            continue;
        };
        let iun = *pol.iun.get(x, y);
        let cos_t = invert_dop_diffuse(*pol.rho.get(x, y), eta)?.cos_theta;
        let v = cam.view_vector(x as f64, y as f64);
        let scale = a * cos_t + iun;
        if !(scale > 0.0) {
            rows.push(Vec::new());
            continue;
        }
        let c: Vector3<f64> = (s * (a * cos_t) - v * iun) / scale;
        rows.push(vec![(i, c.x), (n + i, c.y), (2 * n + i, c.z)]);
    }
    CsrMatrix::from_rows(3 * n, rows)
}

fn check_dims(idx: &PixelIndexing, dims: (usize, usize)) -> Result<()> {
    if idx.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: idx.dims(),
            actual: dims,
        });
    }
    Ok(())
}

/// The normal-space constraint blocks, each with `3N` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRows {
    pub phase: CsrMatrix,
    pub guide_normal: CsrMatrix,
    pub shading: CsrMatrix,
}

/// The assembled guide-anchored least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSystem {
    pub indexing: PixelIndexing,
    /// Constraint rows stacked as phase, guide normal, shading
    /// (`4N + N_D` rows by `3N` columns).
    pub a: CsrMatrix,
    pub n_op: CsrMatrix,
    /// `K × N` selector of anchored unknowns.
    pub w: CsrMatrix,
    pub z_guide: Vec<f64>,
    pub lambda: f64,
    block_rows: [usize; 3],
}

/// Residual norms per constraint block at a depth vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockResiduals {
    pub phase: f64,
    pub guide_normal: f64,
    pub shading: f64,
    /// `‖W Z − z_guide‖`.
    pub anchor: f64,
    /// `‖M Z − b‖ / ‖b‖` for the stacked system.
    pub relative: f64,
}

/// Stacks the constraint blocks and the anchors at every pixel where `guide`
/// is valid.
pub fn assemble(
    rows: ConstraintRows,
    n_op: CsrMatrix,
    guide: &ScalarMap,
    idx: PixelIndexing,
    lambda: f64,
) -> Result<DepthSystem> {
    check_dims(&idx, guide.dims())?;
    let n = idx.len();
    if n_op.nrows() != 3 * n || n_op.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "normal operator is {}×{}, expected {}×{n}",
            n_op.nrows(),
            n_op.ncols(),
            3 * n
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be finite and non-negative")));
    }
    let block_rows = [rows.phase.nrows(), rows.guide_normal.nrows(), rows.shading.nrows()];
    let a = CsrMatrix::vstack(&[&rows.phase, &rows.guide_normal, &rows.shading])?;
    if a.ncols() != 3 * n {
        return Err(Error::InvalidInput(format!("constraint rows have {} columns, expected {}", a.ncols(), 3 * n)));
    }
    let mut z_guide = Vec::new();
    let mut anchors = Vec::new();
    for (i, z) in idx.gather(guide).into_iter().enumerate() {
        if let Some(z) = z {
            anchors.push(vec![(i, 1.0)]);
            z_guide.push(z);
        }
    }
    if anchors.is_empty() {
        return Err(Error::NoAnchors);
    }
    let w = CsrMatrix::from_rows(n, anchors)?;
    let sys = DepthSystem {
        indexing: idx,
        a,
        n_op,
        w,
        z_guide,
        lambda,
        block_rows,
    };
    if !(sys.a.is_finite() && sys.n_op.is_finite() && sys.z_guide.iter().all(|z| z.is_finite())) {
        return Err(Error::NonFinite("depth system".into()));
    }
    Ok(sys)
}

impl DepthSystem {
    /// `[λ·A·N_op; W]` and `[0; z_guide]`.
    pub fn stacked(&self) -> Result<(CsrMatrix, Vec<f64>)> {
        let mut top = self.a.matmul(&self.n_op)?;
        top.scale(self.lambda);
        let m = CsrMatrix::vstack(&[&top, &self.w])?;
        let mut b = vec![0.0; top.nrows()];
        b.extend_from_slice(&self.z_guide);
        Ok((m, b))
    }

    pub fn residuals(&self, z: &[f64]) -> Result<BlockResiduals> {
        let normals = self.n_op.mul_vec(z);
        let r = self.a.mul_vec(&normals);
        let [p, g, _] = self.block_rows;
        let wz = self.w.mul_vec(z);
        let anchor: Vec<f64> = wz.iter().zip(&self.z_guide).map(|(a, b)| a - b).collect();
        let (phase, guide_normal, shading) = (norm(&r[..p]), norm(&r[p..p + g]), norm(&r[p + g..]));
        let total = (self.lambda.powi(2) * norm(&r).powi(2) + norm(&anchor).powi(2)).sqrt();
        Ok(BlockResiduals {
            phase,
            guide_normal,
            shading,
            anchor: norm(&anchor),
            relative: total / norm(&self.z_guide),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthSolution {
    pub depth: ScalarMap,
    pub residuals: BlockResiduals,
    pub solver: LsqSolution,
}

/// Least-squares depth. The iterative route starts from the guide depth
/// (mean guide depth where unanchored). A solve that stops before reaching
/// tolerance returns its best iterate with `solver.converged` unset.
pub fn solve_depth(system: &DepthSystem, opts: &LsqOptions) -> Result<DepthSolution> {
    let (m, b) = system.stacked()?;
    let mean = system.z_guide.iter().sum::<f64>() / system.z_guide.len() as f64;
    let mut x0 = vec![mean; system.indexing.len()];
    for (row, &z) in system.z_guide.iter().enumerate() {
        let (cols, _) = system.w.row(row);
        x0[cols[0]] = z;
    }
    let solver = solve_least_squares(&m, &b, Some(&x0), opts)?;
    if !solver.converged {
        log::warn!(
            "depth solve stopped after {} iterations at relative gradient {:.3e}",
            solver.iterations,
            solver.relative_gradient
        );
    }
    if solver.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("depth solution".into()));
    }
    let residuals = system.residuals(&solver.x)?;
    Ok(DepthSolution {
        depth: system.indexing.to_map(&solver.x),
        residuals,
        solver,
    })
}

/// Inputs to [`reconstruct_depth`].
#[derive(Debug, Clone, Copy)]
pub struct DepthInputs<'a> {
    pub pol: &'a PolarisationImage,
    pub nprime: &'a VectorMap,
    pub specular: &'a Mask,
    pub albedo: &'a ScalarMap,
    pub guide: &'a ScalarMap,
    pub light: &'a LightSource,
    pub eta: RefractiveIndex,
    pub cam: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    /// Weight of the polarisation constraints against the guide anchors.
    pub lambda: f64,
    /// Scale each pixel's constraint rows by [`depth_scaled_weights`].
    pub depth_scaled_rows: bool,
    pub solver: LsqOptions,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            depth_scaled_rows: true,
            solver: LsqOptions::default(),
        }
    }
}

/// Per-pixel factor `n′ · r` with `r = ((x − x0)/fx, (y − y0)/fy, 1)`.
/// Since `N_op Z · r = Z`, scaling a pixel's normal rows by it turns the
/// unnormalised normal into `Z·n̂` when `n′` is exact, so every pixel's
/// constraints are measured in depth units whatever its slant.
pub fn depth_scaled_weights(nprime: &VectorMap, cam: &CameraIntrinsics, idx: &PixelIndexing) -> Result<Vec<f64>> {
    check_dims(idx, nprime.dims())?;
    Ok(idx
        .pixels()
        .iter()
        .map(|&(x, y)| {
            let r = Vector3::new((x as f64 - cam.x0) / cam.fx, (y as f64 - cam.y0) / cam.fy, 1.0);
            nprime.valid(x, y).map_or(1.0, |m| m.dot(&r).max(0.0))
        })
        .collect())
}

/// Builds every block on the foreground where polarisation and `n′` are
/// available (minus pixels without neighbours on both axes).
pub fn build_depth_system(inp: &DepthInputs<'_>, cfg: &DepthConfig) -> Result<DepthSystem> {
    let (w, h) = inp.pol.dims();
    let fg = prune_isolated(&Mask::from_fn(w, h, |x, y| inp.pol.mask.get(x, y) && inp.nprime.is_valid(x, y)));
    let idx = PixelIndexing::new(&fg, inp.specular)?;
    let mut n_op = build_normal_operator(inp.cam, &idx)?;
    if cfg.depth_scaled_rows {
        let w = depth_scaled_weights(inp.nprime, inp.cam, &idx)?;
        let per_row: Vec<f64> = w.iter().chain(&w).chain(&w).copied().collect();
        n_op.scale_rows(&per_row);
    }
    let rows = ConstraintRows {
        phase: phase_rows(inp.pol, &idx)?,
        guide_normal: guide_normal_rows(inp.nprime, &idx)?,
        shading: shading_rows(inp.pol, inp.albedo, inp.light, inp.eta, inp.cam, &idx)?,
    };
    assemble(rows, n_op, inp.guide, idx, cfg.lambda)
}

/// [`build_depth_system`] followed by [`solve_depth`].
pub fn reconstruct_depth(inp: &DepthInputs<'_>, cfg: &DepthConfig) -> Result<DepthSolution> {
    solve_depth(&build_depth_system(inp, cfg)?, &cfg.solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{derivative, unnormalised_normal};
    use crate::polarisation::dop_diffuse;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 320.0, w as f64 / 2.0 - 0.3, h as f64 / 2.0 + 0.2, w, h).unwrap()
    }

    fn full(w: usize, h: usize) -> PixelIndexing {
        PixelIndexing::new(&Mask::new(w, h, true), &Mask::new(w, h, false)).unwrap()
    }

    /// Smooth depth over the grid, metres.
    fn bump(w: usize, h: usize) -> impl Fn(usize, usize) -> f64 {
        move |x, y| {
            let u = x as f64 / w as f64 - 0.5;
            let v = y as f64 / h as f64 - 0.4;
            0.08 + 0.004 * (-(u * u + v * v) * 6.0).exp() + 0.001 * u
        }
    }

    fn normals_of(op: &CsrMatrix, z: &[f64], idx: &PixelIndexing) -> Vec<Vector3<f64>> {
        let v = op.mul_vec(z);
        let n = idx.len();
        (0..n).map(|i| Vector3::new(v[i], v[n + i], v[2 * n + i])).collect()
    }

    #[test]
    fn constant_depth_gives_optical_axis() {
        let idx = full(7, 5);
        let c = cam(7, 5);
        let op = build_normal_operator(&c, &idx).unwrap();
        for n in normals_of(&op, &vec![0.5; idx.len()], &idx) {
            assert!(n.x.abs() < 1e-15 && n.y.abs() < 1e-15);
            assert_relative_eq!(n.z, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_ramp_by_hand() {
        let (w, h) = (9, 6);
        let idx = full(w, h);
        let c = cam(w, h);
        let (z0, a) = (0.09, 2e-4);
        let z: Vec<f64> = idx.pixels().iter().map(|&(x, _)| z0 + a * (x as f64 - c.x0)).collect();
        let op = build_normal_operator(&c, &idx).unwrap();
        for (i, n) in normals_of(&op, &z, &idx).iter().enumerate() {
            let (x, _) = idx.pixel(i);
            assert_relative_eq!(n.x, -c.fx * a, epsilon = 1e-14);
            assert!(n.y.abs() < 1e-15);
            assert_relative_eq!(n.z, (x as f64 - c.x0) * a + z[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn operator_matches_geometry_module() {
        let (w, h) = (12, 10);
        let mut m = Mask::new(w, h, true);
        for (x, y) in [(0, 0), (5, 5), (11, 3), (6, 9), (7, 9)] {
            m.set(x, y, false);
        }
        let m = prune_isolated(&m);
        let idx = PixelIndexing::new(&m, &Mask::new(w, h, false)).unwrap();
        let f = bump(w, h);
        let zmap = ScalarMap::from_fn(w, h, 0.0, |x, y| m.get(x, y).then(|| f(x, y)));
        let zx = derivative(&zmap, Axis::X, DifferenceScheme::SmoothedCentral);
        let zy = derivative(&zmap, Axis::Y, DifferenceScheme::SmoothedCentral);
        let c = cam(w, h);
        let reference = unnormalised_normal(&zmap, &zx, &zy, &c).unwrap();
        let op = build_normal_operator(&c, &idx).unwrap();
        let z: Vec<f64> = idx.gather(&zmap).into_iter().map(Option::unwrap).collect();
        for (i, n) in normals_of(&op, &z, &idx).iter().enumerate() {
            let (x, y) = idx.pixel(i);
            assert!((n - reference.get(x, y)).norm() < 1e-12);
        }
    }

    #[test]
    fn depth_scaled_rows_give_depth_times_unit_normal() {
        let k = consistent(14, 11, 0);
        let w = depth_scaled_weights(&k.nprime, &k.cam, &k.idx).unwrap();
        let op = build_normal_operator(&k.cam, &k.idx).unwrap();
        for (i, n) in normals_of(&op, &k.z, &k.idx).iter().enumerate() {
            assert!((w[i] * n - k.z[i] * n.normalize()).norm() < 1e-14);
        }
    }

    #[test]
    fn isolated_pixels_are_reported() {
        let mut m = Mask::new(5, 5, false);
        for x in 0..5 {
            m.set(x, 2, true);
        }
        let idx = PixelIndexing::new(&m, &Mask::new(5, 5, false)).unwrap();
        match build_normal_operator(&cam(5, 5), &idx) {
            Err(Error::IsolatedPixels(p)) => assert_eq!(p.len(), 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(prune_isolated(&m).count(), 0);
    }

    fn pol_from(phi: ScalarMap, rho: ScalarMap, iun: ScalarMap) -> PolarisationImage {
        PolarisationImage::from_maps(phi, rho, iun).unwrap()
    }

    fn single_row(row: &CsrMatrix, r: usize, n: &Vector3<f64>, ncols: usize) -> f64 {
        let mut v = vec![0.0; ncols];
        let k = ncols / 3;
        v[0] = n.x;
        v[k] = n.y;
        v[2 * k] = n.z;
        row.mul_vec(&v)[r]
    }

    #[test]
    fn phase_row_examples() {
        let idx = full(1, 1);
        let one = |p: f64| pol_from(ScalarMap::filled(1, 1, p), ScalarMap::filled(1, 1, 0.1), ScalarMap::filled(1, 1, 0.5));
        let r = phase_rows(&one(0.0), &idx).unwrap();
        assert_eq!(single_row(&r, 0, &Vector3::new(0.0, 5.0, 1.0), 3), 0.0);
        let q = std::f64::consts::FRAC_PI_4;
        let r = phase_rows(&one(q), &idx).unwrap();
        assert!(single_row(&r, 0, &Vector3::new(1.0, 1.0, 0.3), 3).abs() < 1e-15);
        assert_relative_eq!(single_row(&r, 0, &Vector3::new(1.0, -1.0, 0.3), 3).abs(), 2f64.sqrt(), epsilon = 1e-15);
        let low = pol_from(ScalarMap::filled(1, 1, q), ScalarMap::filled(1, 1, 1e-5), ScalarMap::filled(1, 1, 0.5));
        assert_eq!(phase_rows(&low, &idx).unwrap().nnz(), 0);
    }

    #[test]
    fn specular_phase_row_is_rotated() {
        let idx = PixelIndexing::new(&Mask::new(1, 1, true), &Mask::new(1, 1, true)).unwrap();
        let phi = 0.3f64;
        let p = pol_from(ScalarMap::filled(1, 1, phi), ScalarMap::filled(1, 1, 0.4), ScalarMap::filled(1, 1, 0.5));
        let r = phase_rows(&p, &idx).unwrap();
        let n = Vector3::new(phi.cos(), -phi.sin(), 0.7);
        assert!(single_row(&r, 0, &n, 3).abs() < 1e-15);
        assert!(single_row(&r, 0, &Vector3::new(phi.sin(), phi.cos(), 0.7), 3).abs() > 0.99);
    }

    #[test]
    fn guide_rows_are_the_cross_product() {
        let idx = full(1, 1);
        let m = Vector3::new(0.2, -0.5, 0.8).normalize();
        let nmap = VectorMap::filled(1, 1, m);
        let rows = guide_normal_rows(&nmap, &idx).unwrap();
        let res = |n: Vector3<f64>| Vector3::new(single_row(&rows, 0, &n, 3), single_row(&rows, 1, &n, 3), single_row(&rows, 2, &n, 3));
        assert!(res(m * 3.0).norm() < 1e-15);
        let perp = m.cross(&Vector3::x()).normalize();
        assert_relative_eq!(res(perp).norm(), 1.0, epsilon = 1e-15);
        let n = Vector3::new(0.4, 0.1, -0.3);
        assert!((res(n) - m.cross(&n)).norm() < 1e-15);
    }

    #[test]
    fn shading_row_vanishes_on_consistent_data() {
        let eta = RefractiveIndex::new(1.5).unwrap();
        let c = CameraIntrinsics::new(300.0, 300.0, 0.0, 0.0, 1, 1).unwrap();
        let idx = full(1, 1);
        let light = LightSource::new(Vector3::z()).unwrap();
        let theta = 0.6f64;
        let n = Vector3::new(theta.sin(), 0.0, theta.cos());
        let a = 0.7;
        let iun = a * n.z;
        let pol = pol_from(
            ScalarMap::filled(1, 1, std::f64::consts::FRAC_PI_2),
            ScalarMap::filled(1, 1, dop_diffuse(theta, eta).unwrap()),
            ScalarMap::filled(1, 1, iun),
        );
        let rows = shading_rows(&pol, &ScalarMap::filled(1, 1, a), &light, eta, &c, &idx).unwrap();
        assert!(single_row(&rows, 0, &n, 3).abs() < 1e-15);
        // residual grows linearly in an albedo perturbation
        let r = |da: f64| {
            let rows = shading_rows(&pol, &ScalarMap::filled(1, 1, a * (1.0 + da)), &light, eta, &c, &idx).unwrap();
            single_row(&rows, 0, &n, 3) * (a * (1.0 + da) * n.z + iun)
        };
        assert_relative_eq!(r(0.2), 2.0 * r(0.1), epsilon = 1e-14);
        assert!(r(0.1).abs() > 1e-3);
    }

    #[test]
    fn dimensions_of_small_system() {
        let idx = full(2, 2);
        let c = cam(2, 2);
        let pol = pol_from(ScalarMap::filled(2, 2, 0.3), ScalarMap::filled(2, 2, 0.1), ScalarMap::filled(2, 2, 0.5));
        let rows = ConstraintRows {
            phase: phase_rows(&pol, &idx).unwrap(),
            guide_normal: guide_normal_rows(&VectorMap::filled(2, 2, Vector3::z()), &idx).unwrap(),
            shading: shading_rows(&pol, &ScalarMap::filled(2, 2, 0.5), &LightSource::new(Vector3::z()).unwrap(), RefractiveIndex::new(1.4).unwrap(), &c, &idx)
                .unwrap(),
        };
        let n_op = build_normal_operator(&c, &idx).unwrap();
        let sys = assemble(rows, n_op, &ScalarMap::filled(2, 2, 0.1), idx, 1.0).unwrap();
        assert_eq!(sys.a.nrows(), 4 * 4 + 4);
        let (m, b) = sys.stacked().unwrap();
        assert_eq!((m.nrows(), m.ncols(), b.len()), (24, 4, 24));
        for r in 0..sys.w.nrows() {
            assert_eq!(sys.w.row(r).0.len(), 1);
        }
    }

    #[test]
    fn no_anchors_is_an_error() {
        let idx = full(2, 2);
        let c = cam(2, 2);
        let empty = CsrMatrix::zeros(0, 12);
        let rows = ConstraintRows {
            phase: empty.clone(),
            guide_normal: empty.clone(),
            shading: empty,
        };
        let op = build_normal_operator(&c, &idx).unwrap();
        assert!(matches!(assemble(rows, op, &ScalarMap::invalid(2, 2, 0.0), idx, 1.0), Err(Error::NoAnchors)));
    }

    /// Depth `Z`, exact constraint data for the discrete normals `N_op·Z`.
    struct Consistent {
        idx: PixelIndexing,
        cam: CameraIntrinsics,
        z: Vec<f64>,
        pol: PolarisationImage,
        nprime: VectorMap,
        albedo: ScalarMap,
        light: LightSource,
        eta: RefractiveIndex,
    }

    fn consistent(w: usize, h: usize, specular_every: usize) -> Consistent {
        let c = cam(w, h);
        let spec = Mask::from_fn(w, h, |x, y| specular_every > 0 && (x + y * w) % specular_every == 0);
        let idx = PixelIndexing::new(&Mask::new(w, h, true), &spec).unwrap();
        let f = bump(w, h);
        let z: Vec<f64> = idx.pixels().iter().map(|&(x, y)| f(x, y)).collect();
        let op = build_normal_operator(&c, &idx).unwrap();
        let ns = normals_of(&op, &z, &idx);
        let eta = RefractiveIndex::new(1.4).unwrap();
        let light = LightSource::new(Vector3::new(0.1, 0.2, 1.0)).unwrap();
        let mut phi = ScalarMap::invalid(w, h, 0.0);
        let mut rho = ScalarMap::invalid(w, h, 0.0);
        let mut iun = ScalarMap::invalid(w, h, 0.0);
        let mut nprime = VectorMap::invalid(w, h, Vector3::zeros());
        let albedo = ScalarMap::from_fn(w, h, 0.0, |x, _| Some(if x < w / 2 { 0.4 } else { 0.7 }));
        for (i, n) in ns.iter().enumerate() {
            let (x, y) = idx.pixel(i);
            let nb = n.normalize();
            nprime.set(x, y, nb);
            let v = c.view_vector(x as f64, y as f64);
            let theta = nb.dot(&v).clamp(-1.0, 1.0).acos();
            let alpha = nb.x.atan2(nb.y);
            let a = *albedo.get(x, y);
            if idx.is_specular(i) {
                phi.set(x, y, (alpha - std::f64::consts::FRAC_PI_2).rem_euclid(std::f64::consts::PI));
            } else {
                phi.set(x, y, alpha.rem_euclid(std::f64::consts::PI));
            }
            rho.set(x, y, dop_diffuse(theta, eta).unwrap());
            iun.set(x, y, a * nb.dot(&light.direction()));
        }
        Consistent {
            pol: pol_from(phi, rho, iun),
            idx,
            cam: c,
            z,
            nprime,
            albedo,
            light,
            eta,
        }
    }

    fn system_of(k: &Consistent, guide: &ScalarMap, lambda: f64) -> DepthSystem {
        let rows = ConstraintRows {
            phase: phase_rows(&k.pol, &k.idx).unwrap(),
            guide_normal: guide_normal_rows(&k.nprime, &k.idx).unwrap(),
            shading: shading_rows(&k.pol, &k.albedo, &k.light, k.eta, &k.cam, &k.idx).unwrap(),
        };
        let op = build_normal_operator(&k.cam, &k.idx).unwrap();
        assemble(rows, op, guide, k.idx.clone(), lambda).unwrap()
    }

    #[test]
    fn consistent_data_has_zero_residual() {
        let k = consistent(24, 20, 7);
        let guide = k.idx.to_map(&k.z);
        let sys = system_of(&k, &guide, 1.0);
        let r = sys.residuals(&k.z).unwrap();
        assert!(r.relative < 1e-12, "{r:?}");
        let sol = solve_depth(&sys, &LsqOptions::default()).unwrap();
        for (x, y, &z) in sol.depth.iter_valid() {
            assert!((z - guide.get(x, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_dense_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = consistent(20, 20, 5);
        // noisy partial guide so the constraints and anchors disagree
        let guide = ScalarMap::from_fn(20, 20, 0.0, |x, y| {
            let z = bump(20, 20)(x, y) + rng.random_range(-1e-3..1e-3);
            ((x * 3 + y) % 4 != 0).then_some(z)
        });
        let sys = system_of(&k, &guide, 0.7);
        let (m, b) = sys.stacked().unwrap();
        let dense = m.to_dense();
        let pinv = dense.clone().pseudo_inverse(1e-14).unwrap();
        let oracle = pinv * nalgebra::DVector::from_vec(b);
        for method in [crate::sparse::LsqMethod::Cholesky, crate::sparse::LsqMethod::Cgls] {
            let opts = LsqOptions {
                method,
                ..Default::default()
            };
            let sol = solve_depth(&sys, &opts).unwrap();
            let zmax = oracle.amax();
            for (i, &(x, y)) in sys.indexing.pixels().iter().enumerate() {
                assert!((sol.depth.get(x, y) - oracle[i]).abs() < 1e-8 * zmax, "{method:?}");
            }
        }
    }

    #[test]
    fn small_lambda_returns_the_guide() {
        let k = consistent(10, 8, 0);
        let guide = ScalarMap::from_fn(10, 8, 0.0, |x, y| Some(0.1 + 0.001 * (x + 2 * y) as f64));
        let sys = system_of(&k, &guide, 1e-9);
        let sol = solve_depth(&sys, &LsqOptions::default()).unwrap();
        for (x, y, &z) in sol.depth.iter_valid() {
            assert!((z - guide.get(x, y)).abs() < 1e-9);
        }
        let anchor_only = system_of(&k, &guide, 0.0);
        let sol = solve_depth(&anchor_only, &LsqOptions::default()).unwrap();
        assert_eq!(sol.depth, guide);
    }

    #[test]
    fn anchoring_is_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = consistent(16, 12, 6);
        let guide = ScalarMap::from_fn(16, 12, 0.0, |x, y| Some(bump(16, 12)(x, y) + rng.random_range(-2e-3..2e-3)));
        let mut last = 0.0;
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            let sys = system_of(&k, &guide, lambda);
            let r = solve_depth(&sys, &LsqOptions::default()).unwrap().residuals.anchor;
            assert!(r >= last - 1e-12, "lambda {lambda}: {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn reconstruct_removes_guide_noise() {
        let (w, h) = (30, 26);
        let k = consistent(w, h, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // depth scale is set by the anchors alone, so only zero-mean guide
        // error can be removed
        let guide = ScalarMap::from_fn(w, h, 0.0, |x, y| Some(bump(w, h)(x, y) + rng.random_range(-5e-4..5e-4)));
        let inputs = DepthInputs {
            pol: &k.pol,
            nprime: &k.nprime,
            specular: &Mask::new(w, h, false),
            albedo: &k.albedo,
            guide: &guide,
            light: &k.light,
            eta: k.eta,
            cam: &k.cam,
        };
        let sol = reconstruct_depth(&inputs, &DepthConfig::default()).unwrap();
        let truth = k.idx.to_map(&k.z);
        let mut guide_err = 0.0;
        let mut err = 0.0;
        for (x, y, &z) in sol.depth.iter_valid() {
            err += (z - truth.get(x, y)).abs();
            guide_err += (guide.get(x, y) - truth.get(x, y)).abs();
        }
        assert!(err < 0.5 * guide_err, "{err} vs {guide_err}");
    }

    proptest! {
        #[test]
        fn operator_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let idx = full(5, 4);
            let op = build_normal_operator(&cam(5, 4), &idx).unwrap();
            let z1: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
            let z2: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
            let (n1, n2, nm) = (op.mul_vec(&z1), op.mul_vec(&z2), op.mul_vec(&mix));
            for i in 0..nm.len() {
                prop_assert!((nm[i] - a * n1[i] - b * n2[i]).abs() < 1e-9);
            }
        }
    }
}
