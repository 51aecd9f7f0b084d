//! Sparse matrices and the Krylov solvers used by the PDE modules.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Coordinate-format accumulator; duplicates are summed on conversion.
#[derive(Clone, Debug, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        TripletBuilder {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        TripletBuilder {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    /// Adds explicit (possibly zero) diagonal entries so ILU can factor the result.
    pub fn ensure_diagonal(&mut self) {
        for i in 0..self.nrows.min(self.ncols) {
            self.push(i, i, 0.0);
        }
    }

    pub fn build(self) -> CsrMatrix {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.rows {
            counts[r + 1] += 1;
        }
        for i in 0..self.nrows {
            counts[i + 1] += counts[i];
        }
        let nnz = self.rows.len();
        let mut next = counts.clone();
        let mut cols = vec![0usize; nnz];
        let mut vals = vec![0.0; nnz];
        for t in 0..nnz {
            let r = self.rows[t];
            let slot = next[r];
            next[r] += 1;
            cols[slot] = self.cols[t];
            vals[slot] = self.vals[t];
        }
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        indptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..self.nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|s| (cols[s], vals[s])));
            scratch.sort_by_key(|e| e.0);
            let mut iter = scratch.iter();
            if let Some(&(mut c, mut v)) = iter.next() {
                for &(c2, v2) in iter {
                    if c2 == c {
                        v += v2;
                    } else {
                        indices.push(c);
                        values.push(v);
                        c = c2;
                        v = v2;
                    }
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        }
    }
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[p] * x[self.indices[p]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// y = Aᵀ x without forming the transpose.
    pub fn matvec_transpose(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for p in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[p]] += self.values[p] * xi;
            }
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[p];
                let slot = next[c];
                next[c] += 1;
                indices[slot] = r;
                values[slot] = self.values[p];
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr: counts,
            indices,
            values,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter()
                    .position(|&c| c == i)
                    .map_or(0.0, |p| vals[p])
            })
            .collect()
    }

    /// Submatrix of rows `r0..r1` and columns `c0..c1`.
    pub fn block(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> CsrMatrix {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in rows.clone() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if cols.contains(&c) {
                    indices.push(c - cols.start);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            nrows: rows.len(),
            ncols: cols.len(),
            indptr,
            indices,
            values,
        }
    }
}

/// Incomplete LU factorization with zero fill on the pattern of the input.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Ilu0> {
        let mut lu = a.clone();
        let n = lu.nrows;
        let mut diag_pos = vec![usize::MAX; n];
        for i in 0..n {
            for p in lu.indptr[i]..lu.indptr[i + 1] {
                if lu.indices[p] == i {
                    diag_pos[i] = p;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(Error::Unsupported(format!("ILU(0): row {i} has no diagonal")));
            }
        }
        let mut marker = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.indptr[i], lu.indptr[i + 1]);
            for p in start..end {
                marker[lu.indices[p]] = p;
            }
            for p in start..end {
                let k = lu.indices[p];
                if k >= i {
                    break;
                }
                let pivot = lu.values[diag_pos[k]];
                let factor = lu.values[p] / pivot;
                lu.values[p] = factor;
                for q in diag_pos[k] + 1..lu.indptr[k + 1] {
                    let j = lu.indices[q];
                    let m = marker[j];
                    if m != usize::MAX && m >= start && m < end {
                        lu.values[m] -= factor * lu.values[q];
                    }
                }
            }
            let d = lu.values[diag_pos[i]];
            if d.abs() < 1e-300 || !d.is_finite() {
                // Keep the factorization usable; the Krylov solver copes with a poor preconditioner.
                lu.values[diag_pos[i]] = if d < 0.0 { -1e-12 } else { 1e-12 };
            }
            for p in start..end {
                marker[lu.indices[p]] = usize::MAX;
            }
        }
        Ok(Ilu0 { lu, diag_pos })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let lu = &self.lu;
        let n = lu.nrows;
        for i in 0..n {
            let mut acc = x[i];
            for p in lu.indptr[i]..self.diag_pos[i] {
                acc -= lu.values[p] * x[lu.indices[p]];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for p in self.diag_pos[i] + 1..lu.indptr[i + 1] {
                acc -= lu.values[p] * x[lu.indices[p]];
            }
            x[i] = acc / lu.values[self.diag_pos[i]];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl SolveStats {
    pub fn into_result(self, solver: &'static str) -> Result<SolveStats> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                solver,
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Preconditioned conjugate gradients for a symmetric positive-definite operator.
/// Stops when ‖b − Ax‖ ≤ tol·‖b‖.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> SolveStats {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return SolveStats {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut rnorm = norm2(&r);
    if rnorm <= tol * bnorm {
        return SolveStats {
            iterations: 0,
            residual: rnorm / bnorm,
            converged: true,
        };
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return SolveStats {
                iterations: it,
                residual: rnorm / bnorm,
                converged: false,
            };
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        rnorm = norm2(&r);
        if rnorm <= tol * bnorm {
            return SolveStats {
                iterations: it,
                residual: rnorm / bnorm,
                converged: true,
            };
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    SolveStats {
        iterations: max_iter,
        residual: rnorm / bnorm,
        converged: false,
    }
}

/// Restarted flexible GMRES with right preconditioning. The preconditioner
/// may change between iterations (inner iterative solves are allowed).
/// Stops when ‖b − Ax‖ ≤ tol·‖b‖.
pub fn fgmres(
    apply: impl Fn(&[f64], &mut [f64]),
    mut precond: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> SolveStats {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return SolveStats {
            iterations: 0,
            residual: 0.0,
            converged: true,
        };
    }
    let m = restart.max(1);
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut h = vec![vec![0.0; m]; m + 1];
    let mut cs = vec![0.0; m];
    let mut sn = vec![0.0; m];
    let mut g = vec![0.0; m + 1];
    let mut w = vec![0.0; n];
    let mut total = 0;
    let mut rel: f64;

    loop {
        apply(x, &mut w);
        let mut r0: Vec<f64> = b.iter().zip(&w).map(|(bi, wi)| bi - wi).collect();
        let beta = norm2(&r0);
        rel = beta / bnorm;
        if rel <= tol {
            return SolveStats {
                iterations: total,
                residual: rel,
                converged: true,
            };
        }
        if total >= max_iter {
            break;
        }
        r0.iter_mut().for_each(|e| *e /= beta);
        v.clear();
        z.clear();
        v.push(r0);
        g.iter_mut().for_each(|e| *e = 0.0);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut zk = vec![0.0; n];
            precond(&v[k], &mut zk);
            apply(&zk, &mut w);
            z.push(zk);
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(&w, vi);
                h[i][k] = hik;
                axpy(-hik, vi, &mut w);
            }
            let hnext = norm2(&w);
            h[k + 1][k] = hnext;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = h[k][k] / denom;
                sn[k] = h[k + 1][k] / denom;
            }
            h[k][k] = cs[k] * h[k][k] + sn[k] * h[k + 1][k];
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= tol || total >= max_iter || hnext == 0.0 {
                break;
            }
            v.push(w.iter().map(|e| e / hnext).collect());
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= h[i][j] * y[j];
            }
            y[i] = acc / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &z[j], x);
        }
        if !rel.is_finite() {
            break;
        }
    }
    SolveStats {
        iterations: total,
        residual: rel,
        converged: false,
    }
}
