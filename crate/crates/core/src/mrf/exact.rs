//! Exact min-sum message passing on an elimination tree.
//!
//! Variables are eliminated greedily by minimum degree. Eliminating a
//! variable sums the tables that mention it and minimises it out; the result
//! is the message sent to the clique of the next variable in its scope.
//! Labels are recovered by replaying the eliminations in reverse. The cost is
//! exponential in the largest clique, so the caller bounds it.

use super::graph::{FactorGraph, STATES};

struct Table {
    /// Sorted variable indices; the first is the most significant digit.
    scope: Vec<usize>,
    vals: Vec<f64>,
}

fn index_of(scope: &[usize], labels: &[usize]) -> usize {
    scope.iter().fold(0, |acc, &v| acc * STATES + labels[v])
}

/// Greedy minimum-degree elimination order, or `None` when some clique would
/// exceed `max_states` joint labels.
fn elimination_order(graph: &FactorGraph, max_states: usize) -> Option<Vec<usize>> {
    let n = graph.n_vars();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let link = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    };
    for p in &graph.pairs {
        link(p.vars[0], p.vars[1], &mut adj);
    }
    for t in &graph.ternaries {
        let [a, b, c] = t.vars;
        link(a, b, &mut adj);
        link(a, c, &mut adj);
        link(b, c, &mut adj);
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n).filter(|&v| alive[v]).min_by_key(|&v| (adj[v].len(), v))?;
        let clique_states = STATES.checked_pow(adj[v].len() as u32 + 1)?;
        if clique_states > max_states {
            return None;
        }
        let nb = std::mem::take(&mut adj[v]);
        for &a in &nb {
            adj[a].retain(|&x| x != v);
        }
        for (i, &a) in nb.iter().enumerate() {
            for &b in &nb[i + 1..] {
                link(a, b, &mut adj);
            }
        }
        alive[v] = false;
        order.push(v);
    }
    Some(order)
}

/// Exact minimum-energy labelling when the elimination cliques stay within
/// `max_states` joint labels; `None` otherwise. Ties resolve to the lowest
/// label.
pub fn tree_min_sum(graph: &FactorGraph, max_states: usize) -> Option<Vec<usize>> {
    let n = graph.n_vars();
    let order = elimination_order(graph, max_states)?;

    let mut pool: Vec<Option<Table>> = Vec::new();
    for (v, u) in graph.unary.iter().enumerate() {
        pool.push(Some(Table {
            scope: vec![v],
            vals: u.to_vec(),
        }));
    }
    let mut labels = vec![0usize; n];
    let add_sorted = |vars: &[usize], table: &[f64], pool: &mut Vec<Option<Table>>| {
        let mut scope = vars.to_vec();
        scope.sort_unstable();
        let m = vars.len();
        let mut vals = vec![0.0; table.len()];
        let mut lab = vec![0usize; n.max(1)];
        for (idx, &t) in table.iter().enumerate() {
            let mut c = idx;
            for k in (0..m).rev() {
                lab[vars[k]] = c % STATES;
                c /= STATES;
            }
            vals[index_of(&scope, &lab)] = t;
        }
        pool.push(Some(Table { scope, vals }));
    };
    for p in &graph.pairs {
        add_sorted(&p.vars, &p.table, &mut pool);
    }
    for t in &graph.ternaries {
        add_sorted(&t.vars, &t.table, &mut pool);
    }

    // per eliminated variable: remaining scope and argmin over its assignments
    let mut back: Vec<(usize, Vec<usize>, Vec<usize>)> = Vec::with_capacity(n);
    for &v in &order {
        let bucket: Vec<Table> = pool
            .iter_mut()
            .filter(|t| t.as_ref().is_some_and(|t| t.scope.contains(&v)))
            .map(|t| t.take().unwrap())
            .collect();
        let mut rest: Vec<usize> = bucket.iter().flat_map(|t| t.scope.iter().copied()).filter(|&x| x != v).collect();
        rest.sort_unstable();
        rest.dedup();
        let size = STATES.pow(rest.len() as u32);
        let mut vals = vec![f64::INFINITY; size];
        let mut arg = vec![0usize; size];
        for idx in 0..size {
            let mut c = idx;
            for &r in rest.iter().rev() {
                labels[r] = c % STATES;
                c /= STATES;
            }
            for s in 0..STATES {
                labels[v] = s;
                let e: f64 = bucket.iter().map(|t| t.vals[index_of(&t.scope, &labels)]).sum();
                if e < vals[idx] {
                    vals[idx] = e;
                    arg[idx] = s;
                }
            }
        }
        back.push((v, rest.clone(), arg));
        pool.push(Some(Table { scope: rest, vals }));
    }
    for (v, rest, arg) in back.into_iter().rev() {
        labels[v] = arg[index_of(&rest, &labels)];
    }
    Some(labels)
}
