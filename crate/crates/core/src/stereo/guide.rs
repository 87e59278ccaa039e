//! Metric guide depth and guide normals from disparity or an external depth
//! map.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, StereoRig};
use crate::error::Result;
use crate::geometry::{depth_normals, DifferenceScheme};
use crate::image::{Mask, ScalarMap, VectorMap};
use crate::sparse::{solve_least_squares, CsrMatrix, LsqOptions};

/// Triangulates disparity into left-camera depth, `Z = fx·b / (d + x0_r −
/// x0_l)`. Non-positive denominators are invalid.
pub fn disparity_to_depth(disp: &ScalarMap, rig: &StereoRig) -> Result<ScalarMap> {
    rig.validate()?;
    disp.check_dims(rig.left.dims())?;
    let fb = rig.left.fx * rig.baseline;
    let off = rig.disparity_offset();
    Ok(ScalarMap::from_fn(disp.width(), disp.height(), 0.0, |x, y| {
        let d = disp.valid(x, y)? + off;
        (d > 0.0).then(|| fb / d)
    }))
}

/// Inverse of [`disparity_to_depth`].
pub fn depth_to_disparity(depth: &ScalarMap, rig: &StereoRig) -> Result<ScalarMap> {
    rig.validate()?;
    let fb = rig.left.fx * rig.baseline;
    let off = rig.disparity_offset();
    Ok(ScalarMap::from_fn(depth.width(), depth.height(), 0.0, |x, y| {
        let z = *depth.valid(x, y)?;
        (z > 0.0).then(|| fb / z - off)
    }))
}

/// Unit normals of a coarse depth map by forward differences, backward where
/// the forward neighbour is missing. Isolated pixels are invalid.
pub fn guide_normals(depth: &ScalarMap, cam: &CameraIntrinsics) -> Result<VectorMap> {
    depth.check_dims(cam.dims())?;
    depth_normals(depth, cam, DifferenceScheme::Forward)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FillConfig {
    /// Invalid 4-connected regions smaller than this many pixels are filled.
    pub max_hole: usize,
    /// Apply a 3×3 median over valid pixels after filling.
    pub median: bool,
}

impl Default for FillConfig {
    fn default() -> Self {
        Self {
            max_hole: 64,
            median: true,
        }
    }
}

/// Coarse metric depth with its normals.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideDepth {
    /// Filled and filtered depth in metres.
    pub depth: ScalarMap,
    pub normals: VectorMap,
    /// Pixels with a measured (not filled) depth.
    pub valid: Mask,
}

impl GuideDepth {
    /// Uses an externally measured depth map as is.
    pub fn from_depth(depth: ScalarMap, cam: &CameraIntrinsics) -> Result<Self> {
        depth.check_finite("guide depth")?;
        let normals = guide_normals(&depth, cam)?;
        let valid = depth.mask();
        Ok(Self { depth, normals, valid })
    }
}

/// Fills small holes with the value of the nearest valid pixel (4-connected
/// breadth-first order, scan order on ties), optionally median filters, and
/// computes guide normals. Measured pixels keep their validity flag.
pub fn fill_and_smooth(depth: &ScalarMap, cam: &CameraIntrinsics, cfg: &FillConfig) -> Result<GuideDepth> {
    depth.check_dims(cam.dims())?;
    depth.check_finite("depth")?;
    let valid = depth.mask();
    let (w, h) = depth.dims();
    let mut filled = depth.clone();

    // label invalid components and keep the small ones
    let mut fillable = vec![false; w * h];
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || valid.as_slice()[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbours(i, w, h) {
                if !seen[j] && !valid.as_slice()[j] {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        if comp.len() < cfg.max_hole {
            for i in comp {
                fillable[i] = true;
            }
        }
    }
    // multi-source breadth-first fill from valid pixels
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| valid.as_slice()[i]).collect();
    while let Some(i) = queue.pop_front() {
        let v = filled.data()[i];
        for j in neighbours(i, w, h) {
            if fillable[j] && !filled.mask_slice()[j] {
                filled.data_mut()[j] = v;
                filled.mask_slice_mut()[j] = true;
                queue.push_back(j);
            }
        }
    }

    if cfg.median {
        filled = median3(&filled);
    }
    let normals = guide_normals(&filled, cam)?;
    Ok(GuideDepth {
        depth: filled,
        normals,
        valid,
    })
}

impl GuideDepth {
    /// Recomputes the normals from a membrane interpolation of the depth
    /// over `region`, so large stereo holes still get guide normals. The
    /// depth map itself is unchanged and keeps serving as the anchors.
    pub fn densify(mut self, region: &Mask, cam: &CameraIntrinsics, solver: &LsqOptions) -> Result<Self> {
        let dense = inpaint(&self.depth, region, solver)?;
        self.normals = guide_normals(&dense, cam)?;
        Ok(self)
    }
}

/// Weight of the membrane term that keeps [`inpaint`] well posed where the
/// Laplacian stencil leaves the region.
const MEMBRANE_WEIGHT: f64 = 1e-2;

/// Fills invalid pixels of `region` by a thin-plate fit: minimises the
/// squared 5-point Laplacian over every stencil inside `region ∪ valid` that
/// touches a missing pixel, plus a weak membrane term, with valid pixels
/// fixed. Components of missing pixels that touch no valid pixel stay
/// invalid.
pub fn inpaint(depth: &ScalarMap, region: &Mask, solver: &LsqOptions) -> Result<ScalarMap> {
    depth.check_dims(region.dims())?;
    let (w, h) = depth.dims();
    let known = depth.mask();
    let inside = region.or(&known);
    // missing pixels reachable from a known one through the region
    let mut reach = vec![false; w * h];
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| known.as_slice()[i]).collect();
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, w, h) {
            if inside.as_slice()[j] && !known.as_slice()[j] && !reach[j] {
                reach[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut index = vec![usize::MAX; w * h];
    let mut unknowns = Vec::new();
    for i in (0..w * h).filter(|&i| reach[i]) {
        index[i] = unknowns.len();
        unknowns.push(i);
    }
    let mut out = depth.clone();
    if unknowns.is_empty() {
        return Ok(out);
    }
    let used = |i: usize| known.as_slice()[i] || reach[i];
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    // a coefficient on pixel j goes to the unknowns or, negated, to the rhs
    let mut push = |terms: &[(usize, f64)]| {
        let mut row = Vec::new();
        let mut b = 0.0;
        for &(j, c) in terms {
            if reach[j] {
                row.push((index[j], c));
            } else {
                b -= c * depth.data()[j];
            }
        }
        if !row.is_empty() {
            rows.push(row);
            rhs.push(b);
        }
    };
    for i in (0..w * h).filter(|&i| used(i)) {
        let nb: Vec<usize> = neighbours(i, w, h).collect();
        if nb.len() == 4 && nb.iter().all(|&j| used(j)) && (reach[i] || nb.iter().any(|&j| reach[j])) {
            let mut terms = vec![(i, 4.0)];
            terms.extend(nb.iter().map(|&j| (j, -1.0)));
            push(&terms);
        }
        if reach[i] {
            for &j in nb.iter().filter(|&&j| used(j) && (j > i || !reach[j])) {
                push(&[(i, MEMBRANE_WEIGHT), (j, -MEMBRANE_WEIGHT)]);
            }
        }
    }
    let a = CsrMatrix::from_rows(unknowns.len(), rows)?;
    let sol = solve_least_squares(&a, &rhs, None, solver)?;
    for (&i, &z) in unknowns.iter().zip(&sol.x) {
        out.data_mut()[i] = z;
        out.mask_slice_mut()[i] = true;
    }
    Ok(out)
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    let mut out = [usize::MAX; 4];
    if y > 0 {
        out[0] = i - w;
    }
    if x > 0 {
        out[1] = i - 1;
    }
    if x + 1 < w {
        out[2] = i + 1;
    }
    if y + 1 < h {
        out[3] = i + w;
    }
    out.into_iter().filter(|&j| j != usize::MAX)
}

/// 3×3 median over the valid pixels of each valid pixel's window; even
/// counts take the mean of the two middle values.
fn median3(map: &ScalarMap) -> ScalarMap {
    let (w, h) = map.dims();
    ScalarMap::from_fn(w, h, 0.0, |x, y| {
        map.valid(x, y)?;
        let mut vals = Vec::with_capacity(9);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if map.is_valid_signed(xx, yy) {
                    vals.push(*map.get(xx as usize, yy as usize));
                }
            }
        }
        vals.sort_by(f64::total_cmp);
        let n = vals.len();
        Some(if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        })
    })
}

/// Mean angle in degrees between guide normals and a reference field over
/// their common support.
pub fn mean_normal_angle(a: &VectorMap, b: &VectorMap) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y, u) in a.iter_valid() {
        if let Some(v) = b.valid(x, y) {
            sum += crate::geometry::angle_between(u, v);
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).to_degrees())
}
