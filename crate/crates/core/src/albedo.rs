//! Diffuse albedo from chosen normals, unpolarised intensity and a known
//! light, regularised toward piecewise-constant albedo.
//!
//! The estimate minimises
//! `Σ (a(u)·(n̄′(u)·s) − i(u))² + λ Σ (a(u) − a(v) − g(i(u) − i(v)))²`
//! over diffuse pixels, where `v` runs over right and lower diffuse
//! neighbours and `g` zeroes intensity steps below the threshold `t`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, ScalarMap, VectorMap};
use crate::sparse::{solve_least_squares, CsrMatrix, LsqOptions};

/// Distant point light direction, expressed in the normal frame: `(0, 0, 1)`
/// is a light placed at the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct LightSource(Vector3<f64>);

impl LightSource {
    pub fn new(s: Vector3<f64>) -> Result<Self> {
        let n = s.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidInput(format!("light direction {s:?} is not a direction")));
        }
        Ok(Self(s / n))
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.0
    }
}

impl TryFrom<[f64; 3]> for LightSource {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        Self::new(Vector3::from(v))
    }
}

impl From<LightSource> for [f64; 3] {
    fn from(s: LightSource) -> Self {
        s.0.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlbedoConfig {
    /// Weight of the gradient-consistency term.
    pub lambda_i: f64,
    /// Intensity steps with magnitude below `t` count as zero.
    pub t: f64,
    pub solver: LsqOptions,
}

impl Default for AlbedoConfig {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            t: 0.01,
            solver: LsqOptions::default(),
        }
    }
}

/// Sparsified intensity step: `d` when `|d| ≥ t`, else 0.
pub fn sparsify(d: f64, t: f64) -> f64 {
    if d.abs() < t {
        0.0
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoEstimate {
    /// Albedo clamped to `[0, 1]` on the estimated pixels.
    pub albedo: ScalarMap,
    /// Least-squares solution before clamping.
    pub raw: ScalarMap,
    /// Pixels whose value was clamped.
    pub clamped: usize,
    /// Diffuse pixels facing away from the light.
    pub unlit: usize,
    /// Diffuse pixels left without an estimate because nothing lit ties them
    /// down.
    pub dropped: usize,
}

/// Solves for albedo on the diffuse pixels (valid in `iun` and `normals`,
/// not in `specular`).
pub fn estimate_albedo(
    iun: &ScalarMap,
    normals: &VectorMap,
    specular: &Mask,
    light: &LightSource,
    cfg: &AlbedoConfig,
) -> Result<AlbedoEstimate> {
    normals.check_dims(iun.dims())?;
    if specular.dims() != iun.dims() {
        return Err(Error::DimensionMismatch {
            expected: iun.dims(),
            actual: specular.dims(),
        });
    }
    if !(cfg.lambda_i >= 0.0 && cfg.t >= 0.0) {
        return Err(Error::InvalidInput("lambda_i and t must be non-negative".into()));
    }
    let (w, h) = iun.dims();
    let s = light.direction();
    let diffuse = Mask::from_fn(w, h, |x, y| iun.is_valid(x, y) && normals.is_valid(x, y) && !specular.get(x, y));
    if diffuse.count() == 0 {
        return Err(Error::NoDiffusePixels);
    }
    let shading = |x: usize, y: usize| normals.get(x, y).normalize().dot(&s);
    let lit = Mask::from_fn(w, h, |x, y| diffuse.get(x, y) && shading(x, y) > 0.0);
    let unlit = diffuse.count() - lit.count();

    // keep diffuse pixels connected (through smoothness links) to a lit one
    let smooth = cfg.lambda_i > 0.0;
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let dm = &diffuse;
    let links = move |x: usize, y: usize| {
        [(x + 1, y), (x, y + 1)]
            .into_iter()
            .filter(move |&(xx, yy)| xx < w && yy < h && dm.get(xx, yy))
    };
    if smooth {
        for y in 0..h {
            for x in 0..w {
                if diffuse.get(x, y) {
                    for (xx, yy) in links(x, y) {
                        let (a, b) = (find(&mut parent, y * w + x), find(&mut parent, yy * w + xx));
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut anchored = vec![false; w * h];
    for i in 0..w * h {
        if lit.as_slice()[i] {
            let r = find(&mut parent, i);
            anchored[r] = true;
        }
    }
    let mut index = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for i in 0..w * h {
        if diffuse.as_slice()[i] && anchored[find(&mut parent, i)] {
            index[i] = pixels.len();
            pixels.push(i);
        }
    }
    let dropped = diffuse.count() - pixels.len();

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut rhs = Vec::new();
    for (k, &i) in pixels.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        if lit.as_slice()[i] {
            rows.push(vec![(k, shading(x, y))]);
            rhs.push(*iun.get(x, y));
        }
    }
    if smooth {
        let sw = cfg.lambda_i.sqrt();
        for (k, &i) in pixels.iter().enumerate() {
            let (x, y) = (i % w, i / w);
            for (xx, yy) in links(x, y) {
                let j = index[yy * w + xx];
                rows.push(vec![(k, sw), (j, -sw)]);
                rhs.push(sw * sparsify(iun.get(x, y) - iun.get(xx, yy), cfg.t));
            }
        }
    }
    let a = CsrMatrix::from_rows(pixels.len(), rows)?;
    let sol = solve_least_squares(&a, &rhs, None, &cfg.solver)?;
    if !sol.converged {
        log::warn!("albedo solve stopped at relative gradient {:.3e}", sol.relative_gradient);
    }

    let mut raw = ScalarMap::invalid(w, h, 0.0);
    let mut albedo = ScalarMap::invalid(w, h, 0.0);
    let mut clamped = 0;
    for (&i, &v) in pixels.iter().zip(&sol.x) {
        let (x, y) = (i % w, i / w);
        raw.set(x, y, v);
        let c = v.clamp(0.0, 1.0);
        clamped += (c != v) as usize;
        albedo.set(x, y, c);
    }
    if clamped > 0 {
        log::info!("{clamped} albedo value(s) clamped to [0, 1]");
    }
    Ok(AlbedoEstimate {
        albedo,
        raw,
        clamped,
        unlit,
        dropped,
    })
}

/// Value of the albedo energy for a candidate albedo map on `pixels`.
pub fn albedo_energy(
    albedo: &ScalarMap,
    iun: &ScalarMap,
    normals: &VectorMap,
    light: &LightSource,
    cfg: &AlbedoConfig,
) -> f64 {
    let (w, h) = albedo.dims();
    let s = light.direction();
    let mut e = 0.0;
    for (x, y, &a) in albedo.iter_valid() {
        let sh = normals.get(x, y).normalize().dot(&s);
        if sh > 0.0 {
            e += (a * sh - iun.get(x, y)).powi(2);
        }
        for (xx, yy) in [(x + 1, y), (x, y + 1)] {
            if xx < w && yy < h && albedo.is_valid(xx, yy) {
                let g = sparsify(iun.get(x, y) - iun.get(xx, yy), cfg.t);
                e += cfg.lambda_i * (a - albedo.get(xx, yy) - g).powi(2);
            }
        }
    }
    e
}

/// Gives every pixel of `targets` lacking an albedo the value of the
/// nearest pixel (Euclidean pixel distance) that has one; ties go to the
/// earlier pixel in scan order.
pub fn fill_specular(albedo: &ScalarMap, targets: &Mask) -> Result<ScalarMap> {
    let (w, h) = albedo.dims();
    if albedo.count_valid() == 0 {
        return Err(Error::NoDiffusePixels);
    }
    let mut out = albedo.clone();
    for y in 0..h {
        for x in 0..w {
            if !targets.get(x, y) || albedo.is_valid(x, y) {
                continue;
            }
            // rings of growing Chebyshev radius until no closer pixel can appear
            let mut best: Option<(usize, usize, usize)> = None;
            let key = |d2: usize, xx: usize, yy: usize| (d2, yy, xx);
            let mut r = 1usize;
            loop {
                if let Some((d2, _, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                if r > w.max(h) {
                    break;
                }
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if xx.abs_diff(x).max(yy.abs_diff(y)) != r || !albedo.is_valid(xx, yy) {
                            continue;
                        }
                        let d2 = xx.abs_diff(x).pow(2) + yy.abs_diff(y).pow(2);
                        if best.is_none_or(|(bd, bx, by)| key(d2, xx, yy) < key(bd, bx, by)) {
                            best = Some((d2, xx, yy));
                        }
                    }
                }
                r += 1;
            }
            let (_, bx, by) = best.expect("at least one valid albedo pixel");
            out.set(x, y, *albedo.get(bx, by));
        }
    }
    Ok(out)
}
