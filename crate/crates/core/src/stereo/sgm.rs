//! Semi-global matching on census costs.
//!
//! Matching costs are Hamming distances between 5×5 census signatures. Costs
//! are aggregated along eight scanline directions in two raster passes, the
//! winner is refined by a parabola fit and cross-checked against the
//! right-to-left winner. All aggregation is integer arithmetic, so the
//! result does not depend on evaluation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ScalarMap;

/// Disparity search and regularisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgmConfig {
    /// Smallest disparity searched, in pixels.
    pub min_disparity: i32,
    /// Largest disparity searched, in pixels.
    pub max_disparity: i32,
    /// Penalty for a one-pixel disparity change between path neighbours.
    pub p1: u32,
    /// Penalty for larger disparity jumps.
    pub p2: u32,
    /// Largest left/right winner disagreement kept, in pixels.
    pub lr_threshold: f64,
    /// Required relative margin of the best cost over the best cost at a
    /// disparity more than one pixel away. Zero still demands a strict
    /// winner.
    pub uniqueness: f64,
    /// Left pixels whose 5×5 window spans no more than this intensity range
    /// are textureless and left invalid.
    pub min_texture: f64,
    /// Connected disparity segments (4-neighbours within `speckle_range`)
    /// smaller than this many pixels are invalidated. Zero disables.
    pub speckle_size: usize,
    pub speckle_range: f64,
}

impl Default for SgmConfig {
    fn default() -> Self {
        Self {
            min_disparity: 0,
            max_disparity: 128,
            p1: 10,
            p2: 120,
            lr_threshold: 1.0,
            uniqueness: 0.0,
            min_texture: 0.0,
            speckle_size: 0,
            speckle_range: 1.0,
        }
    }
}

impl SgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_disparity < self.min_disparity {
            return Err(Error::InvalidInput("max_disparity below min_disparity".into()));
        }
        if self.p2 < self.p1 {
            return Err(Error::InvalidInput("p2 must be at least p1".into()));
        }
        if !(self.lr_threshold >= 0.0 && self.uniqueness >= 0.0 && self.min_texture >= 0.0) {
            return Err(Error::InvalidInput("thresholds must be non-negative".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        (self.max_disparity - self.min_disparity + 1) as usize
    }
}

const CENSUS_RADIUS: isize = 2;
/// Cost of a disparity that maps outside the right image.
const OUTSIDE_COST: u16 = 24;

/// 24-bit census signature per pixel and the intensity range of its window;
/// samples outside the image or the valid mask compare as equal to the
/// centre.
fn census(img: &ScalarMap) -> Vec<(u32, f64)> {
    let (w, h) = img.dims();
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let c = *img.get(x as usize, y as usize);
            let (mut lo, mut hi) = (c, c);
            let mut sig = 0u32;
            for dy in -CENSUS_RADIUS..=CENSUS_RADIUS {
                for dx in -CENSUS_RADIUS..=CENSUS_RADIUS {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    sig <<= 1;
                    let (xx, yy) = (x + dx, y + dy);
                    if img.is_valid_signed(xx, yy) {
                        let v = *img.get(xx as usize, yy as usize);
                        lo = lo.min(v);
                        hi = hi.max(v);
                        if v < c {
                            sig |= 1;
                        }
                    }
                }
            }
            (sig, hi - lo)
        })
        .collect()
}

/// Cost volume `c[(y * w + x) * levels + k]` for disparity `min + k`.
fn cost_volume(left: &[(u32, f64)], right: &[(u32, f64)], w: usize, h: usize, cfg: &SgmConfig) -> Vec<u16> {
    let levels = cfg.levels();
    let mut costs = vec![0u16; w * h * levels];
    costs.par_chunks_mut(w * levels).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let l = left[y * w + x].0;
            for k in 0..levels {
                let xr = x as i64 - (cfg.min_disparity as i64 + k as i64);
                row[x * levels + k] = if xr < 0 || xr >= w as i64 {
                    OUTSIDE_COST
                } else {
                    (l ^ right[y * w + xr as usize].0).count_ones() as u16
                };
            }
        }
    });
    costs
}

/// One path update: `cur = c + min(prev[d], prev[d±1] + p1, min(prev) + p2)
/// − min(prev)`.
fn path_step(c: &[u16], prev: Option<&[u32]>, cur: &mut [u32], p1: u32, p2: u32) {
    let Some(prev) = prev else {
        for (o, &v) in cur.iter_mut().zip(c) {
            *o = v as u32;
        }
        return;
    };
    let levels = c.len();
    let pmin = *prev.iter().min().unwrap();
    for d in 0..levels {
        let mut best = prev[d];
        if d > 0 {
            best = best.min(prev[d - 1] + p1);
        }
        if d + 1 < levels {
            best = best.min(prev[d + 1] + p1);
        }
        best = best.min(pmin + p2);
        cur[d] = c[d] as u32 + best - pmin;
    }
}

/// Adds the four path costs whose predecessors precede each pixel in the
/// scan order. `forward` scans rows top to bottom, left to right; otherwise
/// bottom to top, right to left.
fn aggregate_pass(costs: &[u16], w: usize, h: usize, levels: usize, cfg: &SgmConfig, forward: bool, sum: &mut [u32]) {
    // directions as (dx, dy) of the predecessor relative to the pixel
    let s: isize = if forward { -1 } else { 1 };
    let dirs = [(s, 0isize), (s, s), (0, s), (-s, s)];
    let row_len = w * levels;
    let mut prev_rows = vec![vec![0u32; row_len]; 4];
    let mut cur_rows = vec![vec![0u32; row_len]; 4];
    let mut scratch = vec![0u32; levels];
    for yi in 0..h {
        let y = if forward { yi } else { h - 1 - yi };
        for xi in 0..w {
            let x = if forward { xi } else { w - 1 - xi };
            let c = &costs[(y * w + x) * levels..(y * w + x + 1) * levels];
            for (k, &(dx, dy)) in dirs.iter().enumerate() {
                let px = x as isize + dx;
                let py = y as isize + dy;
                let inside = px >= 0 && px < w as isize && py >= 0 && py < h as isize;
                if inside {
                    let src = if dy == 0 { &cur_rows[k] } else { &prev_rows[k] };
                    scratch.copy_from_slice(&src[px as usize * levels..(px as usize + 1) * levels]);
                }
                let pred = inside.then_some(&scratch[..]);
                path_step(c, pred, &mut cur_rows[k][x * levels..(x + 1) * levels], cfg.p1, cfg.p2);
            }
            let out = &mut sum[(y * w + x) * levels..(y * w + x + 1) * levels];
            for cur in &cur_rows {
                for (o, &v) in out.iter_mut().zip(&cur[x * levels..(x + 1) * levels]) {
                    *o += v;
                }
            }
        }
        std::mem::swap(&mut prev_rows, &mut cur_rows);
    }
}

fn parabola(s: &[u32], d: usize) -> f64 {
    if d == 0 || d + 1 >= s.len() {
        return 0.0;
    }
    let (a, b, c) = (s[d - 1] as f64, s[d] as f64, s[d + 1] as f64);
    let denom = a - 2.0 * b + c;
    if denom > 0.0 {
        ((a - c) / (2.0 * denom)).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Dense left-view disparity `x_left − x_right` in pixels. Textureless
/// pixels and pixels failing the uniqueness or left/right check are invalid. A constant image pair
/// yields a fully invalid map.
pub fn sgm_disparity(left: &ScalarMap, right: &ScalarMap, cfg: &SgmConfig) -> Result<ScalarMap> {
    cfg.validate()?;
    right.check_dims(left.dims())?;
    let (w, h) = left.dims();
    let textured = |m: &ScalarMap| m.valid_range().is_some_and(|(lo, hi)| hi > lo);
    if !textured(left) || !textured(right) {
        log::warn!("stereo input has no texture; disparity map is empty");
        return Ok(ScalarMap::invalid(w, h, 0.0));
    }
    let levels = cfg.levels();
    let left_census = census(left);
    let costs = cost_volume(&left_census, &census(right), w, h, cfg);
    let mut sum = vec![0u32; w * h * levels];
    aggregate_pass(&costs, w, h, levels, cfg, true, &mut sum);
    aggregate_pass(&costs, w, h, levels, cfg, false, &mut sum);
    drop(costs);

    // right-view winners from the same volume: right pixel xr at disparity d
    // corresponds to left pixel xr + d
    let right_winner: Vec<Option<usize>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (xr, y) = (i % w, i / w);
            let mut best: Option<(u32, usize)> = None;
            for k in 0..levels {
                let xl = xr as i64 + cfg.min_disparity as i64 + k as i64;
                if xl < 0 || xl >= w as i64 {
                    continue;
                }
                let v = sum[(y * w + xl as usize) * levels + k];
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, k));
                }
            }
            best.map(|b| b.1)
        })
        .collect();

    let valid_in = |x: usize, y: usize| left.is_valid(x, y);
    let disp: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !valid_in(x, y) || left_census[i].1 <= cfg.min_texture {
                return None;
            }
            let s = &sum[i * levels..(i + 1) * levels];
            // only disparities that land inside the right image
            let feasible = |k: usize| {
                let xr = x as i64 - (cfg.min_disparity as i64 + k as i64);
                xr >= 0 && xr < w as i64
            };
            let mut best: Option<usize> = None;
            for k in (0..levels).filter(|&k| feasible(k)) {
                if best.is_none_or(|b| s[k] < s[b]) {
                    best = Some(k);
                }
            }
            let k = best?;
            let runner_up = (0..levels)
                .filter(|&j| feasible(j) && j.abs_diff(k) > 1)
                .map(|j| s[j])
                .min();
            if let Some(r) = runner_up {
                if (r as f64) <= s[k] as f64 * (1.0 + cfg.uniqueness) {
                    return None;
                }
            }
            let d = cfg.min_disparity as f64 + k as f64;
            let xr = (x as i64 - d as i64) as usize;
            let kr = right_winner[y * w + xr]?;
            if (k as f64 - kr as f64).abs() > cfg.lr_threshold {
                return None;
            }
            Some(d + parabola(s, k))
        })
        .collect();

    let data = disp.iter().map(|d| d.unwrap_or(0.0)).collect();
    let mask = disp.iter().map(|d| d.is_some()).collect();
    let out = ScalarMap::from_parts(w, h, data, mask)?;
    Ok(remove_speckles(&out, cfg.speckle_size, cfg.speckle_range))
}

/// Invalidates 4-connected segments of fewer than `max_size` pixels, where
/// neighbours join a segment when their disparities differ by at most
/// `range`.
pub fn remove_speckles(disp: &ScalarMap, max_size: usize, range: f64) -> ScalarMap {
    if max_size == 0 {
        return disp.clone();
    }
    let (w, h) = disp.dims();
    let mut out = disp.clone();
    let mut seen = vec![false; w * h];
    let mut segment = Vec::new();
    for start in 0..w * h {
        if seen[start] || !disp.mask_slice()[start] {
            continue;
        }
        seen[start] = true;
        segment.clear();
        segment.push(start);
        let mut head = 0;
        while head < segment.len() {
            let i = segment[head];
            head += 1;
            let (x, y) = (i % w, i / w);
            let nb = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nb.into_iter().flatten() {
                if !seen[j] && disp.mask_slice()[j] && (disp.data()[j] - disp.data()[i]).abs() <= range {
                    seen[j] = true;
                    segment.push(j);
                }
            }
        }
        if segment.len() < max_size {
            for &i in &segment {
                out.mask_slice_mut()[i] = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn shifted_pair(w: usize, h: usize, shift: usize) -> (ScalarMap, ScalarMap) {
        // right(x − shift) = left(x)
        let tex = texture(w + shift, h, 1);
        let left = ScalarMap::from_fn(w, h, 0.0, |x, y| Some(tex[y * (w + shift) + x]));
        let right = ScalarMap::from_fn(w, h, 0.0, |x, y| Some(tex[y * (w + shift) + x + shift]));
        (left, right)
    }

    fn cfg(max: i32) -> SgmConfig {
        SgmConfig {
            max_disparity: max,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_known_shift() {
        let (l, r) = shifted_pair(64, 48, 7);
        let d = sgm_disparity(&l, &r, &cfg(16)).unwrap();
        let mut n = 0;
        for y in 3..45 {
            for x in 24..60 {
                if let Some(&v) = d.valid(x, y) {
                    assert!((v - 7.0).abs() <= 0.25, "({x}, {y}) = {v}");
                    n += 1;
                }
            }
        }
        assert!(n > 36 * 42 * 9 / 10, "only {n} valid");
    }

    #[test]
    fn constant_images_are_invalid() {
        let c = ScalarMap::filled(20, 10, 0.5);
        let d = sgm_disparity(&c, &c, &cfg(8)).unwrap();
        assert_eq!(d.count_valid(), 0);
    }

    #[test]
    fn textureless_region_is_rejected() {
        let (mut l, mut r) = shifted_pair(96, 64, 5);
        for y in 0..64 {
            for x in 0..96 {
                // flat band across both views
                if (24..40).contains(&y) {
                    l.set(x, y, 0.5);
                    r.set(x, y, 0.5);
                }
            }
        }
        let d = sgm_disparity(&l, &r, &cfg(12)).unwrap();
        let flat_valid = (20..76).filter(|&x| d.is_valid(x, 32)).count();
        assert_eq!(flat_valid, 0);
    }

    #[test]
    fn shift_equivariance() {
        let (l, r) = shifted_pair(80, 40, 6);
        let (l2, r2) = (
            ScalarMap::from_fn(72, 40, 0.0, |x, y| Some(*l.get(x + 8, y))),
            ScalarMap::from_fn(72, 40, 0.0, |x, y| Some(*r.get(x + 8, y))),
        );
        let a = sgm_disparity(&l, &r, &cfg(12)).unwrap();
        let b = sgm_disparity(&l2, &r2, &cfg(12)).unwrap();
        for y in 4..36 {
            for x in 30..68 {
                if let (Some(p), Some(q)) = (a.valid(x + 8, y), b.valid(x, y)) {
                    assert!((p - q).abs() <= 0.25);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let c = ScalarMap::filled(4, 4, 0.5);
        let bad = SgmConfig {
            min_disparity: 5,
            max_disparity: 2,
            ..Default::default()
        };
        assert!(sgm_disparity(&c, &c, &bad).is_err());
    }

    #[test]
    fn speckles_are_removed_by_size_and_range() {
        // 3×3 block of 5 inside a 9×6 field of 1, plus a 1-px step of 0.5
        let mut d = ScalarMap::from_fn(9, 6, 0.0, |x, y| Some(if (2..5).contains(&x) && (1..4).contains(&y) { 5.0 } else { 1.0 }));
        d.set(8, 5, 1.5);
        let out = remove_speckles(&d, 10, 1.0);
        assert_eq!(out.count_valid(), 9 * 6 - 9);
        assert!(!out.is_valid(3, 2) && out.is_valid(8, 5));
        assert_eq!(remove_speckles(&d, 9, 1.0), d);
        assert_eq!(remove_speckles(&d, 0, 1.0), d);
        assert_eq!(remove_speckles(&d, 1000, 10.0).count_valid(), 0);
    }
}
