//! Compressed sparse row matrices and linear least-squares solvers.
//!
//! Reductions use fixed chunk boundaries so results do not depend on the
//! number of worker threads.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

const CHUNK: usize = 4096;

/// Deterministic parallel dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partial.iter().sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a matrix from per-row `(column, value)` lists. Duplicate
    /// columns within a row are summed; explicit zeros are kept.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let start = indices.len();
            for (c, v) in row {
                if c >= ncols {
                    return Err(Error::InvalidInput(format!("column {c} out of range for {ncols} columns")));
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite("sparse matrix entry".into()));
                }
                if indices.len() > start && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            nrows: indptr.len() - 1,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            if r >= nrows {
                return Err(Error::InvalidInput(format!("row {r} out of range for {nrows} rows")));
            }
            rows[r].push((c, v));
        }
        Self::from_rows(ncols, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// `A x`, parallel over rows.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "vector length must match columns");
        (0..self.nrows)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            let (c, v) = self.row(r);
            for (&j, &a) in c.iter().zip(v) {
                let k = next[j];
                indices[k] = r;
                values[k] = a;
                next[j] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(Error::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let rows: Vec<Vec<(usize, f64)>> = (0..self.nrows)
            .into_par_iter()
            .with_min_len(256)
            .map(|i| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                let (c, v) = self.row(i);
                for (&k, &a) in c.iter().zip(v) {
                    let (c2, v2) = other.row(k);
                    for (&j, &b) in c2.iter().zip(v2) {
                        acc.push((j, a * b));
                    }
                }
                acc.sort_by_key(|&(j, _)| j);
                let mut out: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
                for (j, v) in acc {
                    match out.last_mut() {
                        Some(last) if last.0 == j => last.1 += v,
                        _ => out.push((j, v)),
                    }
                }
                out
            })
            .collect();
        Self::from_rows(other.ncols, rows)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(blocks: &[&CsrMatrix]) -> Result<Self> {
        let ncols = blocks.first().map_or(0, |b| b.ncols);
        let mut out = Self::zeros(0, ncols);
        for b in blocks {
            if b.ncols != ncols {
                return Err(Error::InvalidInput("vstack blocks differ in column count".into()));
            }
            let base = out.indices.len();
            out.indices.extend_from_slice(&b.indices);
            out.values.extend_from_slice(&b.values);
            out.indptr.extend(b.indptr[1..].iter().map(|p| p + base));
            out.nrows += b.nrows;
        }
        Ok(out)
    }

    /// Multiplies row `i` by `scale[i]`.
    pub fn scale_rows(&mut self, scale: &[f64]) {
        assert_eq!(scale.len(), self.nrows);
        for (i, &s) in scale.iter().enumerate() {
            let (a, b) = (self.indptr[i], self.indptr[i + 1]);
            self.values[a..b].iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Multiplies every entry by `s`.
    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// Euclidean norm of each column.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.ncols];
        for (&c, &v) in self.indices.iter().zip(&self.values) {
            sq[c] += v * v;
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j)] += a;
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Linear least-squares method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsqMethod {
    /// Direct envelope Cholesky where it fits the memory budget, else CGLS.
    Auto,
    /// Conjugate gradients on the normal equations with column scaling.
    Cgls,
    /// Envelope Cholesky of the column-scaled normal equations with
    /// iterative refinement.
    Cholesky,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsqOptions {
    pub method: LsqMethod,
    /// Relative tolerance on `‖Aᵀ r‖ / ‖Aᵀ b‖`.
    pub tolerance: f64,
    /// CGLS iteration cap as a multiple of the unknown count.
    pub max_iter_factor: usize,
    /// Largest envelope (stored factor entries) attempted by the direct route.
    pub max_envelope: usize,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            method: LsqMethod::Auto,
            tolerance: 1e-10,
            max_iter_factor: 10,
            max_envelope: 60_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub x: Vec<f64>,
    pub method: LsqMethod,
    pub iterations: usize,
    pub converged: bool,
    /// Final `‖Aᵀ r‖ / ‖Aᵀ b‖`.
    pub relative_gradient: f64,
}

/// Minimises `‖A x − b‖` starting from `x0` (zeros when `None`).
pub fn solve_least_squares(a: &CsrMatrix, b: &[f64], x0: Option<&[f64]>, opts: &LsqOptions) -> Result<LsqSolution> {
    if b.len() != a.nrows() {
        return Err(Error::InvalidInput(format!(
            "right-hand side has {} entries for {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares system".into()));
    }
    let n = a.ncols();
    if let Some(x0) = x0 {
        if x0.len() != n {
            return Err(Error::InvalidInput("initial guess has the wrong length".into()));
        }
    }
    // Jacobi column scaling: solve for y = D⁻¹ x with A D
    let norms = a.column_norms();
    if let Some(j) = norms.iter().position(|&c| c == 0.0) {
        return Err(Error::InvalidInput(format!("unknown {j} is unconstrained")));
    }
    let d: Vec<f64> = norms.iter().map(|c| 1.0 / c).collect();
    let mut ad = a.clone();
    for (c, v) in ad.indices.iter().zip(ad.values.iter_mut()) {
        *v *= d[*c];
    }
    let y0: Vec<f64> = match x0 {
        Some(x0) => x0.iter().zip(&norms).map(|(x, c)| x * c).collect(),
        None => vec![0.0; n],
    };
    let adt = ad.transpose();

    let method = match opts.method {
        LsqMethod::Auto => {
            if envelope_size(&adt) <= opts.max_envelope {
                LsqMethod::Cholesky
            } else {
                LsqMethod::Cgls
            }
        }
        m => m,
    };
    let mut sol = match method {
        LsqMethod::Cholesky => cholesky_solve(&ad, &adt, b, &y0, opts)?,
        _ => cgls(&ad, &adt, b, y0, opts),
    };
    for (x, s) in sol.x.iter_mut().zip(&d) {
        *x *= s;
    }
    Ok(sol)
}

fn relative_gradient(a: &CsrMatrix, at: &CsrMatrix, b: &[f64], x: &[f64], atb_norm: f64) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let g = norm(&at.mul_vec(&r));
    if atb_norm > 0.0 {
        g / atb_norm
    } else {
        g
    }
}

fn cgls(a: &CsrMatrix, at: &CsrMatrix, b: &[f64], mut x: Vec<f64>, opts: &LsqOptions) -> LsqSolution {
    let n = a.ncols();
    let atb_norm = norm(&at.mul_vec(b));
    let ax = a.mul_vec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut s = at.mul_vec(&r);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let scale = if atb_norm > 0.0 { atb_norm } else { 1.0 };
    let cap = opts.max_iter_factor.saturating_mul(n).max(1);
    let mut iterations = 0;
    let mut converged = gamma.sqrt() <= opts.tolerance * scale;
    while !converged && iterations < cap {
        let q = a.mul_vec(&p);
        let qq = dot(&q, &q);
        if qq <= 0.0 {
            break;
        }
        let alpha = gamma / qq;
        x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
        r.par_iter_mut().zip(&q).for_each(|(r, q)| *r -= alpha * q);
        s = at.mul_vec(&r);
        let gnew = dot(&s, &s);
        iterations += 1;
        if gnew.sqrt() <= opts.tolerance * scale {
            converged = true;
            break;
        }
        let beta = gnew / gamma;
        gamma = gnew;
        p.par_iter_mut().zip(&s).for_each(|(p, s)| *p = s + beta * *p);
    }
    if !converged {
        log::warn!("CGLS stopped after {iterations} iterations without reaching tolerance");
    }
    let rel = relative_gradient(a, at, b, &x, atb_norm);
    LsqSolution {
        x,
        method: LsqMethod::Cgls,
        iterations,
        converged,
        relative_gradient: rel,
    }
}

/// First column of each row of `AᵀA` (its lower envelope), from `Aᵀ`.
fn envelope_first(at: &CsrMatrix) -> Vec<usize> {
    let n = at.nrows();
    let a = at.transpose();
    let mut first: Vec<usize> = (0..n).collect();
    for r in 0..a.nrows() {
        let (c, _) = a.row(r);
        if let Some(&lo) = c.first() {
            for &j in c {
                first[j] = first[j].min(lo);
            }
        }
    }
    first
}

fn envelope_size(at: &CsrMatrix) -> usize {
    envelope_first(at).iter().enumerate().map(|(i, f)| i - f + 1).sum()
}

/// Lower-triangular envelope (skyline) storage: row `i` holds columns
/// `first[i]..=i`.
struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl Envelope {
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.start[i]..self.start[i + 1]]
    }
}

/// Forms `AᵀA` in envelope storage and factors it in place as `L Lᵀ`.
fn factor_normal_equations(at: &CsrMatrix) -> Result<Envelope> {
    let n = at.nrows();
    let first = envelope_first(at);
    let mut start = Vec::with_capacity(n + 1);
    start.push(0);
    for i in 0..n {
        start.push(start[i] + (i - first[i] + 1));
    }
    let mut data = vec![0.0; start[n]];
    // lower triangle of AᵀA: entry (i, j) = <row i of Aᵀ, row j of Aᵀ>
    let a = at.transpose();
    for r in 0..a.nrows() {
        let (c, v) = a.row(r);
        for (p, (&i, &vi)) in c.iter().zip(v).enumerate() {
            for (&j, &vj) in c[..=p].iter().zip(&v[..=p]) {
                data[start[i] + (j - first[i])] += vi * vj;
            }
        }
    }
    let mut env = Envelope { first, start, data };
    for i in 0..n {
        let fi = env.first[i];
        let si = env.start[i];
        for j in fi..i {
            let fj = env.first[j];
            let lo = fi.max(fj);
            let (head, tail) = env.data.split_at_mut(si);
            let lj = &head[env.start[j]..env.start[j + 1]];
            let li = &mut tail[..i - fi + 1];
            let s: f64 = li[lo - fi..j - fi]
                .iter()
                .zip(&lj[lo - fj..j - fj])
                .map(|(p, q)| p * q)
                .sum();
            li[j - fi] = (li[j - fi] - s) / lj[j - fj];
        }
        let li = &mut env.data[si..si + (i - fi + 1)];
        let s: f64 = li[..i - fi].iter().map(|v| v * v).sum();
        let d = li[i - fi] - s;
        if !(d > 0.0) {
            return Err(Error::InvalidInput(format!(
                "normal equations are not positive definite at unknown {i}"
            )));
        }
        li[i - fi] = d.sqrt();
    }
    Ok(env)
}

/// Solves `L Lᵀ x = rhs` in place.
fn envelope_solve(env: &Envelope, rhs: &mut [f64]) {
    let n = rhs.len();
    for i in 0..n {
        let fi = env.first[i];
        let row = env.row(i);
        let s: f64 = row[..i - fi].iter().zip(&rhs[fi..i]).map(|(l, x)| l * x).sum();
        rhs[i] = (rhs[i] - s) / row[i - fi];
    }
    for i in (0..n).rev() {
        let fi = env.first[i];
        let row = env.row(i);
        rhs[i] /= row[i - fi];
        let xi = rhs[i];
        for (l, x) in row[..i - fi].iter().zip(&mut rhs[fi..i]) {
            *x -= l * xi;
        }
    }
}

const REFINEMENT_STEPS: usize = 3;

fn cholesky_solve(a: &CsrMatrix, at: &CsrMatrix, b: &[f64], y0: &[f64], opts: &LsqOptions) -> Result<LsqSolution> {
    let env = factor_normal_equations(at)?;
    let atb_norm = norm(&at.mul_vec(b));
    let mut x = y0.to_vec();
    let mut iterations = 0;
    let mut rel = f64::INFINITY;
    for _ in 0..=REFINEMENT_STEPS {
        let ax = a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut g = at.mul_vec(&r);
        rel = if atb_norm > 0.0 { norm(&g) / atb_norm } else { norm(&g) };
        if rel <= opts.tolerance {
            break;
        }
        envelope_solve(&env, &mut g);
        x.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
        iterations += 1;
    }
    if rel > opts.tolerance {
        rel = relative_gradient(a, at, b, &x, atb_norm);
    }
    Ok(LsqSolution {
        x,
        method: LsqMethod::Cholesky,
        iterations,
        converged: rel <= opts.tolerance,
        relative_gradient: rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sparse(rng: &mut ChaCha8Rng, m: usize, n: usize, per_row: usize) -> CsrMatrix {
        let rows = (0..m)
            .map(|i| {
                let mut r: Vec<(usize, f64)> = (0..per_row)
                    .map(|_| (rng.random_range(0..n), rng.random_range(-1.0..1.0)))
                    .collect();
                // keep every column touched
                r.push((i % n, 1.0));
                r
            })
            .collect();
        CsrMatrix::from_rows(n, rows).unwrap()
    }

    fn pinv_solution(a: &CsrMatrix, b: &[f64]) -> DVector<f64> {
        let d = a.to_dense();
        let svd = d.svd(true, true);
        svd.solve(&DVector::from_column_slice(b), 1e-14).unwrap()
    }

    #[test]
    fn triplets_sum_duplicates_and_transpose() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 2, 2.0), (1, 0, -1.0), (0, 1, 4.0)]).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.row(0), (&[1usize, 2][..], &[4.0, 3.0][..]));
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
        assert_eq!(m.mul_vec(&[1.0, 1.0, 1.0]), vec![7.0, -1.0]);
        assert!(CsrMatrix::from_triplets(1, 1, &[(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn matmul_and_vstack_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_sparse(&mut rng, 7, 5, 3);
        let b = random_sparse(&mut rng, 5, 4, 2);
        let ab = a.matmul(&b).unwrap();
        assert!((ab.to_dense() - a.to_dense() * b.to_dense()).abs().max() < 1e-14);
        let s = CsrMatrix::vstack(&[&a, &CsrMatrix::identity(5)]).unwrap();
        assert_eq!(s.nrows(), 12);
        let d = s.to_dense();
        assert_eq!(d.rows(7, 5).into_owned(), DMatrix::identity(5, 5));
        let mut c = a.clone();
        c.scale_rows(&[2.0; 7]);
        assert_eq!(c.to_dense(), a.to_dense() * 2.0);
    }

    #[test]
    fn both_solvers_match_pseudoinverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..5 {
            let a = random_sparse(&mut rng, 60, 25, 4);
            let b: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = pinv_solution(&a, &b);
            for method in [LsqMethod::Cgls, LsqMethod::Cholesky] {
                let opts = LsqOptions {
                    method,
                    ..Default::default()
                };
                let sol = solve_least_squares(&a, &b, None, &opts).unwrap();
                assert!(sol.converged, "trial {trial} {method:?}");
                let err = sol.x.iter().zip(want.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(err < 1e-8 * want.amax(), "trial {trial} {method:?} err {err}");
            }
        }
    }

    #[test]
    fn consistent_system_is_solved_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_sparse(&mut rng, 40, 40, 3);
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let b = a.mul_vec(&x);
        let sol = solve_least_squares(&a, &b, None, &LsqOptions::default()).unwrap();
        for (p, q) in sol.x.iter().zip(&x) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_systems() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(solve_least_squares(&a, &[1.0, 1.0], None, &LsqOptions::default()).is_err());
        let a = CsrMatrix::identity(2);
        assert!(matches!(
            solve_least_squares(&a, &[1.0, f64::NAN], None, &LsqOptions::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dot_is_independent_of_thread_count() {
        let v: Vec<f64> = (0..100_000).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e-9 * i as f64).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| dot(&v, &v));
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| dot(&v, &v));
        assert_eq!(one.to_bits(), four.to_bits());
    }

    proptest! {
        #[test]
        fn transpose_is_involution(seed in 0u64..1000, m in 1usize..20, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_sparse(&mut rng, m, n, 3);
            prop_assert_eq!(a.transpose().transpose(), a);
        }
    }
}
