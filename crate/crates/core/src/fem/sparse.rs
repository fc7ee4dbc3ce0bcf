//! Compressed sparse row storage, Jacobi-preconditioned conjugate gradients and a
//! banded LU fallback for nonsymmetric systems.

use rayon::prelude::*;

use super::FemError;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix on the given pattern; each row's columns are sorted and deduplicated.
    pub fn from_pattern(mut rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    fn position(&self, r: usize, c: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        cols.binary_search(&c).ok().map(|k| self.row_ptr[r] + k)
    }

    /// Adds `v` at `(r, c)`; the entry must be in the pattern.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let k = self
            .position(r, c)
            .unwrap_or_else(|| panic!("entry ({r}, {c}) outside sparsity pattern"));
        self.values[k] += v;
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |k| self.values[k])
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    pub fn row_mut(&mut self, r: usize) -> (&[usize], &mut [f64]) {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[range.clone()], &mut self.values[range])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.get(r, r)).collect()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().with_min_len(1024).enumerate().for_each(|(r, yr)| {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yr = s;
        });
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        (0..self.n).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol * scale))
    }

    /// Half bandwidth `max |r - c|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }
}

/// Blocked parallel dot product; the block partial sums are added in order, so the result
/// does not depend on the thread count.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    const BLOCK: usize = 4096;
    let partial: Vec<f64> = a
        .par_chunks(BLOCK)
        .zip(b.par_chunks(BLOCK))
        .map(|(x, y)| dot_seq(x, y))
        .collect();
    partial.iter().sum()
}

fn dot_seq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot_seq(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual target `|b - K x| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final relative residual.
    pub residual: f64,
}

/// Removes the mean of every component of an interleaved `m`-component vector.
pub fn remove_component_means(v: &mut [f64], m: usize) {
    let n = v.len() / m;
    for a in 0..m {
        let mean = (0..n).map(|i| v[i * m + a]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * m + a] -= mean;
        }
    }
}

/// Jacobi-preconditioned CG. When `deflate` is `Some(m)`, the per-component constants are
/// treated as a nullspace and projected out of the right-hand side and the iterates.
pub fn pcg(
    mat: &CsrMatrix,
    rhs: &[f64],
    x: &mut [f64],
    config: SolverConfig,
    deflate: Option<usize>,
) -> Result<SolveStats, FemError> {
    let n = mat.n();
    let mut b = rhs.to_vec();
    if let Some(m) = deflate {
        remove_component_means(&mut b, m);
        remove_component_means(x, m);
    }
    let bnorm = norm(&b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats::default());
    }
    let inv_diag: Vec<f64> = mat
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = mat.apply(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if let Some(m) = deflate {
        remove_component_means(&mut r, m);
    }
    let mut res = norm(&r) / bnorm;
    if res <= config.tol {
        return Ok(SolveStats {
            iterations: 0,
            residual: res,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    if let Some(m) = deflate {
        remove_component_means(&mut z, m);
    }
    let mut p = z.clone();
    let mut rz = dot_seq(&r, &z);
    let mut q = vec![0.0; n];
    for it in 1..=config.max_iter {
        mat.mul_vec(&p, &mut q);
        let pq = dot_seq(&p, &q);
        if pq <= 0.0 {
            return Err(FemError::SolverStalled {
                iterations: it,
                residual: res,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = norm(&r) / bnorm;
        if res <= config.tol {
            // confirm with the true residual
            let mut tr = mat.apply(x);
            for i in 0..n {
                tr[i] = b[i] - tr[i];
            }
            if let Some(m) = deflate {
                remove_component_means(&mut tr, m);
                remove_component_means(x, m);
            }
            let true_res = norm(&tr) / bnorm;
            if true_res <= config.tol * 10.0 {
                return Ok(SolveStats {
                    iterations: it,
                    residual: true_res,
                });
            }
            r = tr;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if let Some(m) = deflate {
            remove_component_means(&mut z, m);
        }
        let rz_new = dot_seq(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(FemError::SolverStalled {
        iterations: config.max_iter,
        residual: res,
    })
}

/// Largest band storage (entries) the direct fallback will allocate.
pub const MAX_BAND_ENTRIES: usize = 60_000_000;

/// Gaussian elimination without pivoting in band storage. Valid for matrices whose
/// symmetric part is positive definite, which covers every assembled elliptic system.
pub fn banded_lu_solve(mat: &CsrMatrix, rhs: &[f64]) -> Result<Vec<f64>, FemError> {
    let n = mat.n();
    let bw = mat.bandwidth();
    let width = 2 * bw + 1;
    if n.saturating_mul(width) > MAX_BAND_ENTRIES {
        return Err(FemError::DirectSolveTooLarge { unknowns: n, bandwidth: bw });
    }
    // band[r * width + (c + bw - r)]
    let mut band = vec![0.0; n * width];
    for r in 0..n {
        for (c, v) in mat.row(r) {
            band[r * width + c + bw - r] = v;
        }
    }
    let mut x = rhs.to_vec();
    for k in 0..n {
        let pivot = band[k * width + bw];
        if pivot.abs() < 1e-300 {
            return Err(FemError::SolverStalled {
                iterations: k,
                residual: f64::NAN,
            });
        }
        let last = (k + bw).min(n - 1);
        for r in (k + 1)..=last {
            let factor = band[r * width + k + bw - r] / pivot;
            if factor == 0.0 {
                continue;
            }
            band[r * width + k + bw - r] = 0.0;
            for c in (k + 1)..=last {
                band[r * width + c + bw - r] -= factor * band[k * width + c + bw - k];
            }
            x[r] -= factor * x[k];
        }
    }
    for k in (0..n).rev() {
        let last = (k + bw).min(n - 1);
        let mut s = x[k];
        for c in (k + 1)..=last {
            s -= band[k * width + c + bw - k] * x[c];
        }
        x[k] = s / band[k * width + bw];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![i];
                if i > 0 {
                    r.push(i - 1);
                }
                if i + 1 < n {
                    r.push(i + 1);
                }
                r
            })
            .collect();
        let mut a = CsrMatrix::from_pattern(rows);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn cg_solves_tridiagonal() {
        let a = laplace_1d(50);
        let exact: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.apply(&exact);
        let mut x = vec![0.0; 50];
        let stats = pcg(&a, &b, &mut x, SolverConfig { tol: 1e-12, max_iter: 200 }, None).unwrap();
        assert!(stats.residual <= 1e-11);
        for (u, v) in x.iter().zip(&exact) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let a = laplace_1d(10);
        let mut x = vec![1.0; 10];
        let s = pcg(&a, &[0.0; 10], &mut x, SolverConfig::default(), None).unwrap();
        assert_eq!(s.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stall_is_reported() {
        let a = laplace_1d(200);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let r = pcg(&a, &b, &mut x, SolverConfig { tol: 1e-14, max_iter: 3 }, None);
        assert!(matches!(r, Err(FemError::SolverStalled { iterations: 3, .. })));
    }

    #[test]
    fn banded_lu_matches_nonsymmetric_system() {
        let n = 30;
        let mut a = laplace_1d(n);
        for i in 1..n {
            a.add(i, i - 1, 0.3);
        }
        assert!(!a.is_symmetric(1e-14));
        let exact: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let b = a.apply(&exact);
        let x = banded_lu_solve(&a, &b).unwrap();
        for (u, v) in x.iter().zip(&exact) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}
