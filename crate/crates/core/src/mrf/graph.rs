//! Discrete factor graph over candidate labels and its energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of labels per variable.
pub const STATES: usize = 6;

/// Cost assigned to unavailable labels.
pub const BIG: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct PairFactor {
    pub vars: [usize; 2],
    /// `table[a * STATES + b]` for labels `(a, b)`.
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryFactor {
    pub vars: [usize; 3],
    /// `table[(a * STATES + b) * STATES + c]` for labels `(a, b, c)`.
    pub table: Vec<f64>,
}

/// Energy `Σ unary + Σ pairwise + Σ ternary` over six-state variables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FactorGraph {
    pub unary: Vec<[f64; STATES]>,
    pub pairs: Vec<PairFactor>,
    pub ternaries: Vec<TernaryFactor>,
}

impl FactorGraph {
    pub fn new(n_vars: usize) -> Self {
        Self {
            unary: vec![[0.0; STATES]; n_vars],
            pairs: Vec::new(),
            ternaries: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.unary.len()
    }

    pub fn add_pair(&mut self, u: usize, v: usize, table: Vec<f64>) {
        debug_assert_eq!(table.len(), STATES * STATES);
        self.pairs.push(PairFactor { vars: [u, v], table });
    }

    pub fn add_ternary(&mut self, u: usize, v: usize, w: usize, table: Vec<f64>) {
        debug_assert_eq!(table.len(), STATES * STATES * STATES);
        self.ternaries.push(TernaryFactor { vars: [u, v, w], table });
    }

    /// Checks index ranges, table sizes, distinct factor variables and
    /// finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if n == 0 {
            return Err(Error::NoForeground);
        }
        let finite = |t: &[f64]| t.iter().all(|v| v.is_finite());
        if !self.unary.iter().all(|u| finite(u)) {
            return Err(Error::NonFinite("unary table".into()));
        }
        for p in &self.pairs {
            if p.vars.iter().any(|&v| v >= n) || p.vars[0] == p.vars[1] || p.table.len() != STATES * STATES {
                return Err(Error::InvalidInput("malformed pairwise factor".into()));
            }
            if !finite(&p.table) {
                return Err(Error::NonFinite("pairwise table".into()));
            }
        }
        for t in &self.ternaries {
            let [a, b, c] = t.vars;
            if t.vars.iter().any(|&v| v >= n) || a == b || b == c || a == c || t.table.len() != STATES.pow(3) {
                return Err(Error::InvalidInput("malformed ternary factor".into()));
            }
            if !finite(&t.table) {
                return Err(Error::NonFinite("ternary table".into()));
            }
        }
        Ok(())
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let u: f64 = self.unary.iter().zip(labels).map(|(t, &l)| t[l]).sum();
        let p: f64 = self
            .pairs
            .iter()
            .map(|f| f.table[labels[f.vars[0]] * STATES + labels[f.vars[1]]])
            .sum();
        let t: f64 = self
            .ternaries
            .iter()
            .map(|f| {
                let [a, b, c] = f.vars;
                f.table[(labels[a] * STATES + labels[b]) * STATES + labels[c]]
            })
            .sum();
        u + p + t
    }

    /// Per-variable unary argmin, lowest label on ties.
    pub fn unary_argmin(&self) -> Vec<usize> {
        self.unary.iter().map(|u| argmin(u)).collect()
    }
}

/// Index of the smallest entry, lowest index on ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// How the mismatch factor `k` enters the unary cost of a candidate whose
/// kind disagrees with the initial mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MismatchRule {
    /// Cost `f / k`: with `k < 1` a mismatch costs more than a match.
    #[default]
    Divide,
    /// Cost `k · f`, the formula as literally written.
    Multiply,
}

/// Relative weights of the energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrfWeights {
    /// Mismatch factor between a candidate's kind and the initial mask.
    pub k: f64,
    pub mismatch: MismatchRule,
    pub w_pair: f64,
    pub w_tern: f64,
}

impl Default for MrfWeights {
    fn default() -> Self {
        Self {
            k: 0.1,
            mismatch: MismatchRule::Divide,
            w_pair: 1.0,
            w_tern: 1.0,
        }
    }
}

impl MrfWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidInput(format!("k must be positive, got {}", self.k)));
        }
        if !(self.w_pair >= 0.0 && self.w_tern >= 0.0 && self.w_pair.is_finite() && self.w_tern.is_finite()) {
            return Err(Error::InvalidInput("term weights must be non-negative".into()));
        }
        Ok(())
    }
}
