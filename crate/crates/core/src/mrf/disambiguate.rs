//! Factor graph over candidate labels and decoding of the chosen normals.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::bp::{solve_bp, BpConfig, BpResult};
use super::costs::{pairwise_cost, surface_gradient, unary_cost};
use super::graph::{FactorGraph, MrfWeights, BIG, STATES};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{Map, Mask, VectorMap};
use crate::polarisation::candidates::{slot_kind, CandidateField, SLOTS};
use crate::polarisation::ReflectanceKind;

/// A factor graph with one variable per foreground pixel, together with the
/// normal each label stands for.
#[derive(Debug, Clone)]
pub struct MrfProblem {
    pub graph: FactorGraph,
    pub width: usize,
    pub height: usize,
    /// Pixel of each variable, row-major.
    pub pixels: Vec<(usize, usize)>,
    /// Normal per label; absent labels carry `BIG` unary cost.
    pub normals: Vec<[Option<Vector3<f64>>; SLOTS]>,
    /// Variables whose labels are guide-normal stand-ins.
    pub pseudo: Vec<bool>,
}

fn is_specular(slot: usize) -> bool {
    slot_kind(slot) == ReflectanceKind::Specular
}

/// Builds unary tables from candidates and guide normals, pairwise label
/// smoothness over 4-neighbours and curl costs over `(x, y), (x+1, y),
/// (x, y+1)` triplets. Foreground pixels without candidates get two
/// stand-in labels equal to the guide normal (or the view vector when the
/// guide is missing), of the kind given by the initial mask.
pub fn build_graph(
    cands: &CandidateField,
    foreground: &Mask,
    guide: &VectorMap,
    initial_specular: &Mask,
    cam: &CameraIntrinsics,
    weights: &MrfWeights,
) -> Result<MrfProblem> {
    weights.validate()?;
    let (w, h) = cands.dims();
    for dims in [foreground.dims(), guide.dims(), initial_specular.dims(), cam.dims()] {
        if dims != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                actual: dims,
            });
        }
    }
    let mut var_of = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if foreground.get(x, y) {
                var_of[y * w + x] = pixels.len();
                pixels.push((x, y));
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::NoForeground);
    }

    let per_var: Vec<([Option<Vector3<f64>>; SLOTS], [f64; STATES], bool)> = pixels
        .par_iter()
        .map(|&(x, y)| {
            let g = guide.valid(x, y);
            let l0 = initial_specular.get(x, y);
            let mut slots = *cands.get(x, y);
            let mut unary = [BIG; STATES];
            let pseudo = slots.iter().all(|s| s.is_none());
            if pseudo {
                let n = g.copied().unwrap_or_else(|| cam.view_vector(x as f64, y as f64));
                let first = if l0 { 2 } else { 0 };
                for s in first..first + 2 {
                    slots[s] = Some(n);
                    unary[s] = (-1.0f64).exp();
                }
            } else {
                for (s, n) in slots.iter().enumerate() {
                    if let Some(n) = n {
                        unary[s] = unary_cost(n, g, l0, slot_kind(s), weights);
                    }
                }
            }
            (slots, unary, pseudo)
        })
        .collect();

    let mut graph = FactorGraph::new(pixels.len());
    for (u, (_, t, _)) in graph.unary.iter_mut().zip(&per_var) {
        *u = *t;
    }
    let normals: Vec<[Option<Vector3<f64>>; SLOTS]> = per_var.iter().map(|p| p.0).collect();
    let pseudo: Vec<bool> = per_var.iter().map(|p| p.2).collect();

    let pair_table: Vec<f64> = (0..STATES * STATES)
        .map(|i| weights.w_pair * pairwise_cost(is_specular(i / STATES), is_specular(i % STATES)))
        .collect();
    let neighbour = |x: usize, y: usize| -> Option<usize> {
        (x < w && y < h && foreground.get(x, y)).then(|| var_of[y * w + x])
    };
    let mut triplets = Vec::new();
    for &(x, y) in &pixels {
        let u = var_of[y * w + x];
        let right = neighbour(x + 1, y);
        let down = neighbour(x, y + 1);
        if let Some(v) = right {
            graph.add_pair(u, v, pair_table.clone());
        }
        if let Some(v) = down {
            graph.add_pair(u, v, pair_table.clone());
        }
        if let (Some(v), Some(d)) = (right, down) {
            triplets.push([u, v, d]);
        }
    }

    let gradients: Vec<[(f64, f64); SLOTS]> = normals
        .iter()
        .map(|slots| std::array::from_fn(|s| slots[s].map_or((0.0, 0.0), |n| surface_gradient(&n))))
        .collect();
    let tables: Vec<Vec<f64>> = triplets
        .par_iter()
        .map(|&[u, v, d]| {
            let (gu, gv, gd) = (&gradients[u], &gradients[v], &gradients[d]);
            let mut t = Vec::with_capacity(STATES.pow(3));
            for a in 0..STATES {
                for b in 0..STATES {
                    for c in 0..STATES {
                        let curl = (gd[c].0 - gu[a].0) - (gv[b].1 - gu[a].1);
                        t.push(weights.w_tern * curl.abs());
                    }
                }
            }
            t
        })
        .collect();
    for ([u, v, d], t) in triplets.into_iter().zip(tables) {
        graph.add_ternary(u, v, d, t);
    }

    Ok(MrfProblem {
        graph,
        width: w,
        height: h,
        pixels,
        normals,
        pseudo,
    })
}

/// Chosen label per foreground pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub labels: Map<usize>,
}

impl LabelField {
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }
}

/// Specular mask implied by the labels: set where the chosen label is a
/// specular slot.
pub fn update_mask(labels: &LabelField) -> Mask {
    let (w, h) = labels.dims();
    Mask::from_fn(w, h, |x, y| labels.labels.valid(x, y).is_some_and(|&l| is_specular(l)))
}

/// Result of the joint normal and reflectance-kind labelling.
#[derive(Debug, Clone)]
pub struct Disambiguation {
    pub labels: LabelField,
    /// Chosen unit normal per foreground pixel.
    pub normals: VectorMap,
    /// Updated specular mask.
    pub specular: Mask,
    pub inference: BpResult,
}

/// Minimises the graph energy and decodes normals and the specular mask.
pub fn disambiguate(problem: &MrfProblem, cfg: &BpConfig) -> Result<Disambiguation> {
    let inference = solve_bp(&problem.graph, cfg)?;
    let (w, h) = (problem.width, problem.height);
    let mut labels = Map::invalid(w, h, 0usize);
    let mut normals = Map::invalid(w, h, Vector3::zeros());
    for (i, &(x, y)) in problem.pixels.iter().enumerate() {
        let l = inference.labels[i];
        let n = problem.normals[i][l].ok_or_else(|| {
            Error::InvalidInput(format!("pixel ({x}, {y}) decoded to an absent candidate"))
        })?;
        labels.set(x, y, l);
        normals.set(x, y, n);
    }
    let labels = LabelField { labels };
    let specular = update_mask(&labels);
    Ok(Disambiguation {
        labels,
        normals,
        specular,
        inference,
    })
}
