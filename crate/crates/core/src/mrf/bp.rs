//! Min-sum inference on pairwise and ternary factors.
//!
//! Small graphs whose elimination cliques stay bounded are solved exactly on
//! an elimination tree. Everything else runs synchronous damped loopy belief
//! propagation followed by block coordinate descent on the best decode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::exact::tree_min_sum;
use super::graph::{argmin, FactorGraph, STATES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpConfig {
    pub max_iters: usize,
    /// Weight kept from the previous message, in `[0, 1)`.
    pub damping: f64,
    /// Largest message change treated as converged.
    pub tolerance: f64,
    /// Largest graph handed to the exact elimination route; 0 disables it.
    pub exact_max_vars: usize,
    /// Largest joint label count of an elimination clique.
    pub exact_max_states: usize,
    /// Sweep cap for block coordinate descent after loopy propagation.
    pub polish_sweeps: usize,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            damping: 0.5,
            tolerance: 1e-9,
            exact_max_vars: 64,
            exact_max_states: 7776,
            polish_sweeps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    /// Best-energy labelling seen across iterations.
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Energy of the per-variable unary argmin.
    pub baseline_energy: f64,
    pub converged: bool,
    /// Whether the exact elimination route produced the labels.
    pub exact: bool,
    pub iterations: usize,
    /// Decoded energy after each iteration; entry 0 is the unary baseline.
    pub trace: Vec<f64>,
}

type Msg = [f64; STATES];

struct Factor {
    vars: Vec<usize>,
    table: Vec<f64>,
    /// Index of this factor's first edge; edges are consecutive.
    edge0: usize,
}

/// Moves every pairwise factor whose variables both belong to a ternary
/// factor into that ternary's table. Fewer, larger factors shorten the loops
/// that message passing has to traverse.
fn fold_factors(graph: &FactorGraph) -> Vec<Factor> {
    use std::collections::HashMap;
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    for (t, f) in graph.ternaries.iter().enumerate() {
        let [a, b, c] = f.vars;
        for (p, q) in [(a, b), (a, c), (b, c)] {
            owner.entry((p.min(q), p.max(q))).or_insert(t);
        }
    }
    let mut tern: Vec<Vec<f64>> = graph.ternaries.iter().map(|f| f.table.clone()).collect();
    let mut pairs = Vec::new();
    for p in &graph.pairs {
        let [u, v] = p.vars;
        match owner.get(&(u.min(v), u.max(v))) {
            Some(&t) => {
                let vars = graph.ternaries[t].vars;
                let pu = vars.iter().position(|&x| x == u).unwrap();
                let pv = vars.iter().position(|&x| x == v).unwrap();
                let table = &mut tern[t];
                for (idx, e) in table.iter_mut().enumerate() {
                    let lab = [idx / (STATES * STATES), (idx / STATES) % STATES, idx % STATES];
                    *e += p.table[lab[pu] * STATES + lab[pv]];
                }
            }
            None => pairs.push(p),
        }
    }
    let mut factors = Vec::with_capacity(pairs.len() + tern.len());
    let mut edge = 0;
    for (f, table) in graph.ternaries.iter().zip(tern) {
        factors.push(Factor {
            vars: f.vars.to_vec(),
            table,
            edge0: edge,
        });
        edge += 3;
    }
    for p in pairs {
        factors.push(Factor {
            vars: p.vars.to_vec(),
            table: p.table.clone(),
            edge0: edge,
        });
        edge += 2;
    }
    factors
}

fn normalise(m: &mut Msg) {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    m.iter_mut().for_each(|v| *v -= lo);
}

/// Outgoing min-sum messages of one factor given its incoming messages.
fn factor_messages(f: &Factor, incoming: &[Msg]) -> Vec<Msg> {
    let mut out = vec![[f64::INFINITY; STATES]; f.vars.len()];
    match f.vars.len() {
        2 => {
            let (na, nb) = (&incoming[0], &incoming[1]);
            for a in 0..STATES {
                for b in 0..STATES {
                    let t = f.table[a * STATES + b];
                    out[0][a] = out[0][a].min(t + nb[b]);
                    out[1][b] = out[1][b].min(t + na[a]);
                }
            }
        }
        3 => {
            let (na, nb, nc) = (&incoming[0], &incoming[1], &incoming[2]);
            for a in 0..STATES {
                for b in 0..STATES {
                    let row = &f.table[(a * STATES + b) * STATES..(a * STATES + b + 1) * STATES];
                    for c in 0..STATES {
                        let t = row[c];
                        out[0][a] = out[0][a].min(t + nb[b] + nc[c]);
                        out[1][b] = out[1][b].min(t + na[a] + nc[c]);
                        out[2][c] = out[2][c].min(t + na[a] + nb[b]);
                    }
                }
            }
        }
        _ => unreachable!("factors have two or three variables"),
    }
    out
}

/// Block coordinate descent: for each factor in turn, relabels its variables
/// jointly to the best combination given all other labels. Stops when a full
/// sweep changes nothing or after `max_sweeps`. Returns the number of sweeps.
pub fn polish_labels(graph: &FactorGraph, labels: &mut [usize], max_sweeps: usize) -> usize {
    let n = graph.n_vars();
    // factors touching each variable: (is_ternary, index)
    let mut touch: Vec<Vec<(bool, usize)>> = vec![Vec::new(); n];
    for (i, f) in graph.ternaries.iter().enumerate() {
        for &v in &f.vars {
            touch[v].push((true, i));
        }
    }
    for (i, f) in graph.pairs.iter().enumerate() {
        for &v in &f.vars {
            touch[v].push((false, i));
        }
    }
    let factor_cost = |labels: &[usize], t: bool, i: usize| -> f64 {
        if t {
            let [a, b, c] = graph.ternaries[i].vars;
            graph.ternaries[i].table[(labels[a] * STATES + labels[b]) * STATES + labels[c]]
        } else {
            let [a, b] = graph.pairs[i].vars;
            graph.pairs[i].table[labels[a] * STATES + labels[b]]
        }
    };
    // energy of every term involving any of `block`
    let local = |labels: &[usize], block: &[usize]| -> f64 {
        let mut seen: Vec<(bool, usize)> = Vec::new();
        let mut e = 0.0;
        for &v in block {
            e += graph.unary[v][labels[v]];
            for &f in &touch[v] {
                if !seen.contains(&f) {
                    seen.push(f);
                    e += factor_cost(labels, f.0, f.1);
                }
            }
        }
        e
    };
    let blocks: Vec<Vec<usize>> = graph
        .ternaries
        .iter()
        .map(|f| f.vars.to_vec())
        .chain(graph.pairs.iter().map(|f| f.vars.to_vec()))
        .collect();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for block in &blocks {
            let current: Vec<usize> = block.iter().map(|&v| labels[v]).collect();
            let mut best = current.clone();
            let mut best_e = local(labels, block);
            let combos = STATES.pow(block.len() as u32);
            for code in 0..combos {
                let mut c = code;
                for &v in block.iter().rev() {
                    labels[v] = c % STATES;
                    c /= STATES;
                }
                let e = local(labels, block);
                if e < best_e - 1e-12 * best_e.abs().max(1.0) {
                    best_e = e;
                    best = block.iter().map(|&v| labels[v]).collect();
                }
            }
            for (&v, &l) in block.iter().zip(&best) {
                labels[v] = l;
            }
            if best != current {
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    sweeps
}

/// Minimises the graph energy. The unary argmin is the first labelling
/// considered, so the result never exceeds its energy.
pub fn solve_bp(graph: &FactorGraph, cfg: &BpConfig) -> Result<BpResult> {
    graph.validate()?;
    if !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::InvalidInput(format!("damping must lie in [0, 1), got {}", cfg.damping)));
    }
    if graph.n_vars() <= cfg.exact_max_vars {
        if let Some(labels) = tree_min_sum(graph, cfg.exact_max_states) {
            let baseline_energy = graph.energy(&graph.unary_argmin());
            let energy = graph.energy(&labels);
            return Ok(BpResult {
                labels,
                energy,
                baseline_energy,
                converged: true,
                exact: true,
                iterations: 0,
                trace: vec![baseline_energy, energy],
            });
        }
    }
    let mut r = loopy_bp(graph, cfg);
    if cfg.polish_sweeps > 0 {
        polish_labels(graph, &mut r.labels, cfg.polish_sweeps);
        r.energy = graph.energy(&r.labels);
        r.trace.push(r.energy);
    }
    Ok(r)
}

/// Loopy min-sum belief propagation, returning the lowest-energy decode seen.
fn loopy_bp(graph: &FactorGraph, cfg: &BpConfig) -> BpResult {
    let n = graph.n_vars();
    let factors = fold_factors(graph);
    let n_edges: usize = factors.iter().map(|f| f.vars.len()).sum();
    // edges incident to each variable
    let mut var_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for f in &factors {
        for (k, &v) in f.vars.iter().enumerate() {
            var_edges[v].push(f.edge0 + k);
        }
    }

    let mut f2v: Vec<Msg> = vec![[0.0; STATES]; n_edges];
    let mut v2f: Vec<Msg> = vec![[0.0; STATES]; n_edges];

    let mut best = graph.unary_argmin();
    let baseline_energy = graph.energy(&best);
    let mut best_energy = baseline_energy;
    let mut trace = vec![baseline_energy];
    let mut converged = false;
    let mut iterations = 0;

    if factors.is_empty() {
        converged = true;
    }

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        // variable to factor
        let fresh: Vec<(usize, Msg)> = (0..n)
            .into_par_iter()
            .with_min_len(64)
            .flat_map_iter(|v| {
                let edges = &var_edges[v];
                let f2v = &f2v;
                let unary = graph.unary[v];
                edges.iter().map(move |&e| {
                    let mut m = unary;
                    for &o in edges {
                        if o != e {
                            for s in 0..STATES {
                                m[s] += f2v[o][s];
                            }
                        }
                    }
                    normalise(&mut m);
                    (e, m)
                })
            })
            .collect();
        for (e, m) in fresh {
            v2f[e] = m;
        }

        // factor to variable
        let updated: Vec<Vec<Msg>> = factors
            .par_iter()
            .with_min_len(64)
            .map(|f| {
                let k = f.vars.len();
                factor_messages(f, &v2f[f.edge0..f.edge0 + k])
            })
            .collect();
        let mut delta: f64 = 0.0;
        for (f, msgs) in factors.iter().zip(updated) {
            for (k, mut m) in msgs.into_iter().enumerate() {
                normalise(&mut m);
                let old = &mut f2v[f.edge0 + k];
                for s in 0..STATES {
                    let v = cfg.damping * old[s] + (1.0 - cfg.damping) * m[s];
                    delta = delta.max((v - old[s]).abs());
                    old[s] = v;
                }
            }
        }

        let labels: Vec<usize> = (0..n)
            .into_par_iter()
            .with_min_len(256)
            .map(|v| {
                let mut b = graph.unary[v];
                for &e in &var_edges[v] {
                    for s in 0..STATES {
                        b[s] += f2v[e][s];
                    }
                }
                argmin(&b)
            })
            .collect();
        let e = graph.energy(&labels);
        trace.push(e);
        if e < best_energy {
            best_energy = e;
            best = labels;
        }
        if delta < cfg.tolerance {
            converged = true;
        }
    }
    if !converged {
        log::info!("belief propagation stopped after {iterations} iterations without converging");
    }
    BpResult {
        labels: best,
        energy: best_energy,
        baseline_energy,
        converged,
        exact: false,
        iterations,
        trace,
    }
}
