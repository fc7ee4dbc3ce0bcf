//! Periodic cell problems on `Y = [0,1)^2`: correctors, the homogenized tensor, the
//! oscillation tensor `b`, flux correctors and ball-averaged coefficients.
//!
//! Tensor entries follow the coefficient layout: row `(a, i)`, column `(b, j)`, index
//! `a * 2 + i`. Corrector `chi_j^b` is stored as column `b * 2 + j`, a nodal field with `m`
//! interleaved components.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::coefficient::ellipticity_bounds;
use crate::fem::sparse::{self, CsrMatrix, SolveStats, SolverConfig};
use crate::fem::{assemble_stiffness, element_coefficients, CoefficientField, FemError, DIM};
use crate::geometry::{split_cell, triangle_geometry, Ball, DiagonalPattern, Point};
use crate::weights::ball_nodes;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("cell resolution {0} too small (need >= {MIN_RESOLUTION})")]
    ResolutionTooSmall(usize),
    #[error("alternating diagonals need an even resolution, got {0}")]
    OddResolution(usize),
    #[error("cell solve failed: {0}")]
    SolveFailed(#[from] FemError),
    #[error("cell problems need a symmetric coefficient")]
    NonSymmetric,
}

pub const MIN_RESOLUTION: usize = 16;

/// Tolerance of corrector and Poisson solves on the cell.
pub const CELL_TOL: f64 = 1e-12;

/// Uniform triangulation of the unit cell with opposite faces identified. Node `(i, j)` sits
/// at `(i/n, j/n)`; triangle `2 (j n + i) + k` is the `k`-th half of cell `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicMesh {
    n: usize,
    pattern: DiagonalPattern,
    triangles: Vec<[usize; 3]>,
    coords: Vec<[Point; 3]>,
}

impl PeriodicMesh {
    pub fn new(n: usize, pattern: DiagonalPattern) -> Result<Self, CellError> {
        if n < MIN_RESOLUTION {
            return Err(CellError::ResolutionTooSmall(n));
        }
        if pattern == DiagonalPattern::Alternating && n % 2 == 1 {
            return Err(CellError::OddResolution(n));
        }
        let h = 1.0 / n as f64;
        let mut triangles = Vec::with_capacity(2 * n * n);
        let mut coords = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (i1, j1) = ((i + 1) % n, (j + 1) % n);
                let rising = pattern.rising(i, j);
                let ids = split_cell(j * n + i, j * n + i1, j1 * n + i1, j1 * n + i, rising);
                let p = |a: usize, b: usize| [a as f64 * h, b as f64 * h];
                let pts = split_cell(p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1), rising);
                triangles.extend(ids);
                coords.extend(pts);
            }
        }
        Ok(Self {
            n,
            pattern,
            triangles,
            coords,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn pattern(&self) -> DiagonalPattern {
        self.pattern
    }

    pub fn n_nodes(&self) -> usize {
        self.n * self.n
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Unwrapped triangle corners.
    pub fn coords(&self) -> &[[Point; 3]] {
        &self.coords
    }

    pub fn area(&self) -> f64 {
        0.5 * self.h() * self.h()
    }

    pub fn node_point(&self, v: usize) -> Point {
        [(v % self.n) as f64 * self.h(), (v / self.n) as f64 * self.h()]
    }

    /// Periodic partner of a node index given possibly out-of-range grid coordinates.
    pub fn node(&self, i: i64, j: i64) -> usize {
        let n = self.n as i64;
        (j.rem_euclid(n) * n + i.rem_euclid(n)) as usize
    }

    /// Triangle holding `y` (reduced mod 1) and the barycentric coordinates there.
    pub fn locate(&self, y: Point) -> (usize, [f64; 3]) {
        let n = self.n as f64;
        let u = y[0].rem_euclid(1.0) * n;
        let v = y[1].rem_euclid(1.0) * n;
        let i = (u.floor() as usize).min(self.n - 1);
        let j = (v.floor() as usize).min(self.n - 1);
        let (s, t) = (u - i as f64, v - j as f64);
        let rising = self.pattern.rising(i, j);
        let (k, bary) = if rising {
            if t <= s {
                // (0,0), (1,0), (1,1)
                (0, [1.0 - s, s - t, t])
            } else {
                // (0,0), (1,1), (0,1)
                (1, [1.0 - t, s, t - s])
            }
        } else if s + t <= 1.0 {
            // (0,0), (1,0), (0,1)
            (0, [1.0 - s - t, s, t])
        } else {
            // (1,0), (1,1), (0,1)
            (1, [1.0 - t, s + t - 1.0, 1.0 - s])
        };
        (2 * (j * self.n + i) + k, bary)
    }

    /// Per-triangle gradients of a nodal field with `m` components, layout `[t][a][i]`.
    pub fn gradient(&self, values: &[f64], m: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_triangles() * m * DIM];
        out.par_chunks_mut(m * DIM).enumerate().for_each(|(t, chunk)| {
            let (_, g) = triangle_geometry(self.coords[t]);
            let tri = self.triangles[t];
            for a in 0..m {
                for i in 0..DIM {
                    chunk[a * DIM + i] = (0..3).map(|k| values[tri[k] * m + a] * g[k][i]).sum();
                }
            }
        });
        out
    }

    /// Nodal gradient by area-weighted averaging of the surrounding triangle gradients.
    pub fn recovered_gradient(&self, values: &[f64]) -> Vec<[f64; 2]> {
        let grads = self.gradient(values, 1);
        let mut acc = vec![[0.0; 2]; self.n_nodes()];
        let mut weight = vec![0.0; self.n_nodes()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                acc[v][0] += grads[2 * t];
                acc[v][1] += grads[2 * t + 1];
                weight[v] += 1.0;
            }
        }
        acc.iter()
            .zip(&weight)
            .map(|(g, w)| [g[0] / w, g[1] / w])
            .collect()
    }

    /// Nodal interpolant of a periodic function.
    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|v| f(self.node_point(v))).collect()
    }

    /// `int_Y u v` for P1 fields, exact.
    pub fn l2_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let a = self.area();
        self.triangles
            .iter()
            .map(|t| {
                let s: f64 = (0..3)
                    .map(|p| (0..3).map(|q| u[t[p]] * v[t[q]] * if p == q { 2.0 } else { 1.0 }).sum::<f64>())
                    .sum();
                a / 12.0 * s
            })
            .sum()
    }
}

/// Scalar periodic Laplacian stiffness matrix.
fn laplacian(mesh: &PeriodicMesh) -> CsrMatrix {
    let abar = vec![vec![1.0, 0.0, 0.0, 1.0]; mesh.n_triangles()];
    assemble_stiffness(mesh.n_nodes(), mesh.triangles(), mesh.coords(), &abar, 1)
}

fn cell_config() -> SolverConfig {
    SolverConfig {
        tol: CELL_TOL,
        max_iter: 50_000,
    }
}

/// Correctors `chi_j^b` on a periodic mesh.
#[derive(Debug, Clone)]
pub struct Correctors {
    pub coef: CoefficientField,
    pub mesh: PeriodicMesh,
    /// Per-triangle `A` averaged over edge midpoints, `(m d)^2` entries each.
    pub element_coef: Vec<Vec<f64>>,
    /// Nodal `chi` per column `b * 2 + j`.
    pub chi: Vec<Vec<f64>>,
    /// Per-triangle gradients of each column, layout `[t][g][k]`.
    pub chi_grad: Vec<Vec<f64>>,
    pub stats: Vec<SolveStats>,
    /// Max over columns of `|K chi - rhs|`, divided by the largest `|rhs|` over columns.
    pub weak_residual: f64,
}

impl Correctors {
    pub fn m(&self) -> usize {
        self.coef.m()
    }

    pub fn size(&self) -> usize {
        self.coef.size()
    }

    /// `chi` of column `col` at `y` by P1 interpolation.
    pub fn chi_at(&self, y: Point, col: usize) -> Vec<f64> {
        let m = self.m();
        let (t, bary) = self.mesh.locate(y);
        let tri = self.mesh.triangles()[t];
        (0..m)
            .map(|a| (0..3).map(|k| bary[k] * self.chi[col][tri[k] * m + a]).sum())
            .collect()
    }

    /// `grad chi` of column `col` on the cell triangle holding `y`, layout `[g][k]`.
    pub fn grad_chi_at(&self, y: Point, col: usize) -> &[f64] {
        let (t, _) = self.mesh.locate(y);
        let w = self.m() * DIM;
        &self.chi_grad[col][t * w..(t + 1) * w]
    }
}

pub fn solve_correctors(coef: &CoefficientField, res: usize) -> Result<Correctors, CellError> {
    solve_correctors_with(coef, res, DiagonalPattern::Uniform)
}

/// Solves `-div(A grad chi_j^b) = div(A grad P_j^b)` with zero-mean normalisation.
pub fn solve_correctors_with(
    coef: &CoefficientField,
    res: usize,
    pattern: DiagonalPattern,
) -> Result<Correctors, CellError> {
    if !coef.is_symmetric() {
        return Err(CellError::NonSymmetric);
    }
    coef.validate()?;
    let mesh = PeriodicMesh::new(res, pattern)?;
    let m = coef.m();
    let size = coef.size();
    let element_coef = element_coefficients(mesh.coords(), coef, 1.0);
    let mat = assemble_stiffness(mesh.n_nodes(), mesh.triangles(), mesh.coords(), &element_coef, m);
    let results: Vec<(Vec<f64>, SolveStats, f64, f64)> = (0..size)
        .into_par_iter()
        .map(|col| {
            let mut rhs = vec![0.0; mesh.n_nodes() * m];
            for (t, tri) in mesh.triangles().iter().enumerate() {
                let (area, g) = triangle_geometry(mesh.coords()[t]);
                let abar = &element_coef[t];
                for (k, &v) in tri.iter().enumerate() {
                    for alpha in 0..m {
                        let mut s = 0.0;
                        for i in 0..DIM {
                            s += abar[(alpha * DIM + i) * size + col] * g[k][i];
                        }
                        rhs[v * m + alpha] -= area * s;
                    }
                }
            }
            let mut x = vec![0.0; rhs.len()];
            if rhs.iter().all(|v| *v == 0.0) {
                return Ok((x, SolveStats::default(), 0.0, 0.0));
            }
            let stats = sparse::pcg(&mat, &rhs, &mut x, cell_config(), Some(m))?;
            sparse::remove_component_means(&mut x, m);
            let r: Vec<f64> = mat.apply(&x).iter().zip(&rhs).map(|(a, b)| a - b).collect();
            Ok((x, stats, sparse::norm(&r), sparse::norm(&rhs)))
        })
        .collect::<Result<_, FemError>>()?;
    let mut chi = Vec::with_capacity(size);
    let mut stats = Vec::with_capacity(size);
    let mut residual: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, s, r, b) in results {
        chi.push(x);
        stats.push(s);
        residual = residual.max(r);
        scale = scale.max(b);
    }
    // relative to the largest load so near-zero columns do not dominate
    let weak_residual = if scale > 0.0 { residual / scale } else { 0.0 };
    let chi_grad = chi.iter().map(|x| mesh.gradient(x, m)).collect();
    Ok(Correctors {
        coef: coef.clone(),
        mesh,
        element_coef,
        chi,
        chi_grad,
        stats,
        weak_residual,
    })
}

/// `A (E + grad chi)` on triangle `t`, `(m d)^2` entries.
fn corrected_flux(c: &Correctors, t: usize) -> Vec<f64> {
    let size = c.size();
    let abar = &c.element_coef[t];
    let mut out = abar.clone();
    for col in 0..size {
        let g = &c.chi_grad[col][t * size..(t + 1) * size];
        for row in 0..size {
            let mut s = 0.0;
            for (gk, gv) in g.iter().enumerate() {
                s += abar[row * size + gk] * gv;
            }
            out[row * size + col] += s;
        }
    }
    out
}

/// `A_hat = int_Y A (E + grad chi)`, `(m d)^2` row-major entries.
pub fn homogenize(c: &Correctors) -> Vec<f64> {
    let size = c.size();
    let area = c.mesh.area();
    let mut out = vec![0.0; size * size];
    for t in 0..c.mesh.n_triangles() {
        for (o, v) in out.iter_mut().zip(corrected_flux(c, t)) {
            *o += area * v;
        }
    }
    // symmetric up to rounding for symmetric A; make it exact
    for r in 0..size {
        for c in r + 1..size {
            let v = 0.5 * (out[r * size + c] + out[c * size + r]);
            out[r * size + c] = v;
            out[c * size + r] = v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BTensor {
    /// Per-triangle `b`, `(m d)^2` entries each.
    pub values: Vec<Vec<f64>>,
    /// `int_Y b` per entry.
    pub averages: Vec<f64>,
}

impl BTensor {
    pub fn max_average(&self) -> f64 {
        self.averages.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |a, b| a.max(b.abs()))
    }
}

/// `b = A (E + grad chi) - A_hat` per triangle.
pub fn compute_b(c: &Correctors, a_hat: &[f64]) -> BTensor {
    let area = c.mesh.area();
    let values: Vec<Vec<f64>> = (0..c.mesh.n_triangles())
        .into_par_iter()
        .map(|t| corrected_flux(c, t).iter().zip(a_hat).map(|(f, a)| f - a).collect())
        .collect();
    let mut averages = vec![0.0; a_hat.len()];
    for v in &values {
        for (a, x) in averages.iter_mut().zip(v) {
            *a += area * x;
        }
    }
    BTensor { values, averages }
}

/// `max_{(a,b,j)} |int_Y b_ij^{ab} d_i psi|` for a scalar nodal test function `psi`.
pub fn weak_divergence(mesh: &PeriodicMesh, b: &BTensor, m: usize, psi: &[f64]) -> f64 {
    let size = m * DIM;
    let grads = mesh.gradient(psi, 1);
    let area = mesh.area();
    let mut worst: f64 = 0.0;
    for alpha in 0..m {
        for col in 0..size {
            let mut s = 0.0;
            for t in 0..mesh.n_triangles() {
                for i in 0..DIM {
                    s += area * b.values[t][(alpha * DIM + i) * size + col] * grads[2 * t + i];
                }
            }
            worst = worst.max(s.abs());
        }
    }
    worst
}

/// `||grad psi||_{L^2(Y)}` of a nodal field.
pub fn gradient_norm(mesh: &PeriodicMesh, psi: &[f64]) -> f64 {
    let g = mesh.gradient(psi, 1);
    (g.iter().map(|v| v * v).sum::<f64>() * mesh.area()).sqrt()
}

/// Random trigonometric periodic test function on the cell nodes.
pub fn random_periodic_test(mesh: &PeriodicMesh, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-3i32..=3) as f64,
                rng.gen_range(-3i32..=3) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    mesh.interpolate(|y| {
        terms
            .iter()
            .map(|(a, kx, ky, ph)| a * (std::f64::consts::TAU * (kx * y[0] + ky * y[1]) + ph).sin())
            .sum()
    })
}

/// Flux correctors `phi_kij^{ab} = d_k f_ij^{ab} - d_i f_kj^{ab}` with `Laplace f = b`, built
/// from the exact P1 gradients of `f` and therefore constant on each triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxCorrectors {
    pub m: usize,
    /// Per-triangle values, `d (m d)^2` entries laid out `[k][row (a,i)][col (b,j)]`.
    pub phi: Vec<Vec<f64>>,
    pub stats: Vec<SolveStats>,
}

impl FluxCorrectors {
    fn size(&self) -> usize {
        self.m * DIM
    }

    pub fn index(&self, k: usize, row: usize, col: usize) -> usize {
        let s = self.size();
        (k * s + row) * s + col
    }

    pub fn max_abs(&self) -> f64 {
        self.phi.iter().flatten().fold(0.0, |a, b| a.max(b.abs()))
    }

    /// Worst `|phi_kij + phi_ikj|` over nodes and indices.
    pub fn antisymmetry_defect(&self) -> f64 {
        let m = self.m;
        let mut worst: f64 = 0.0;
        for node in &self.phi {
            // per triangle
            for alpha in 0..m {
                for k in 0..DIM {
                    for i in 0..DIM {
                        for col in 0..self.size() {
                            let a = node[self.index(k, alpha * DIM + i, col)];
                            let b = node[self.index(i, alpha * DIM + k, col)];
                            worst = worst.max((a + b).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}

pub fn flux_correctors(mesh: &PeriodicMesh, b: &BTensor, m: usize) -> Result<FluxCorrectors, CellError> {
    let size = m * DIM;
    let lap = laplacian(mesh);
    let area = mesh.area();
    // f for every entry (row, col) of b
    let solved: Vec<(Vec<f64>, SolveStats)> = (0..size * size)
        .into_par_iter()
        .map(|e| {
            let mut rhs = vec![0.0; mesh.n_nodes()];
            for (t, tri) in mesh.triangles().iter().enumerate() {
                for &v in tri {
                    // weak form of Laplace f = b: int grad f . grad v = -int b v
                    rhs[v] -= b.values[t][e] * area / 3.0;
                }
            }
            let mut x = vec![0.0; rhs.len()];
            if rhs.iter().all(|v| *v == 0.0) {
                return Ok((vec![0.0; 2 * mesh.n_triangles()], SolveStats::default()));
            }
            let stats = sparse::pcg(&lap, &rhs, &mut x, cell_config(), Some(1))?;
            sparse::remove_component_means(&mut x, 1);
            Ok((mesh.gradient(&x, 1), stats))
        })
        .collect::<Result<_, FemError>>()?;
    let mut phi = vec![vec![0.0; DIM * size * size]; mesh.n_triangles()];
    let fc = |k: usize, row: usize, col: usize| (k * size + row) * size + col;
    for (t, out) in phi.iter_mut().enumerate() {
        for alpha in 0..m {
            for k in 0..DIM {
                for i in 0..DIM {
                    for col in 0..size {
                        let f_ij = &solved[(alpha * DIM + i) * size + col].0;
                        let f_kj = &solved[(alpha * DIM + k) * size + col].0;
                        out[fc(k, alpha * DIM + i, col)] = f_ij[2 * t + k] - f_kj[2 * t + i];
                    }
                }
            }
        }
    }
    Ok(FluxCorrectors {
        m,
        phi,
        stats: solved.into_iter().map(|(_, s)| s).collect(),
    })
}

/// `max |int_Y (d_k phi_kij - b_ij) psi| / ||psi||_{L^2}` over all index tuples, with the
/// derivative taken weakly: `int d_k phi psi = -int phi d_k psi`.
pub fn reconstruction_residual(mesh: &PeriodicMesh, b: &BTensor, phi: &FluxCorrectors, psi: &[f64]) -> f64 {
    let size = phi.size();
    let area = mesh.area();
    let norm = mesh.l2_inner(psi, psi).sqrt();
    let grads = mesh.gradient(psi, 1);
    let psi_mean: Vec<f64> = mesh
        .triangles()
        .iter()
        .map(|t| (psi[t[0]] + psi[t[1]] + psi[t[2]]) / 3.0)
        .collect();
    let mut worst: f64 = 0.0;
    for row in 0..size {
        for col in 0..size {
            let mut s = 0.0;
            for t in 0..mesh.n_triangles() {
                let mut flux = 0.0;
                for k in 0..DIM {
                    flux += phi.phi[t][phi.index(k, row, col)] * grads[2 * t + k];
                }
                s -= area * (flux + b.values[t][row * size + col] * psi_mean[t]);
            }
            worst = worst.max(s.abs());
        }
    }
    if norm > 0.0 {
        worst / norm
    } else {
        0.0
    }
}

/// Everything computed on one cell mesh.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub correctors: Correctors,
    pub a_hat: Vec<f64>,
    pub b: BTensor,
    pub phi: FluxCorrectors,
    pub diagnostics: CellDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub resolution: usize,
    pub chi_h1: f64,
    pub chi_mean: f64,
    pub weak_residual: f64,
    pub b_average: f64,
    pub b_divergence: f64,
    pub phi_antisymmetry: f64,
    pub phi_reconstruction: f64,
}

/// Number of random periodic test functions used for the weak diagnostics.
pub const DIAGNOSTIC_TESTS: u64 = 100;

impl CorrectorSet {
    pub fn compute(coef: &CoefficientField, res: usize) -> Result<Self, CellError> {
        Self::compute_with(coef, res, DiagonalPattern::Uniform)
    }

    pub fn compute_with(coef: &CoefficientField, res: usize, pattern: DiagonalPattern) -> Result<Self, CellError> {
        let correctors = solve_correctors_with(coef, res, pattern)?;
        let a_hat = homogenize(&correctors);
        let b = compute_b(&correctors, &a_hat);
        let m = coef.m();
        let phi = flux_correctors(&correctors.mesh, &b, m)?;
        let mesh = &correctors.mesh;
        let tests: Vec<(f64, f64)> = (0..DIAGNOSTIC_TESTS)
            .into_par_iter()
            .map(|s| {
                let psi = random_periodic_test(mesh, s);
                let gn = gradient_norm(mesh, &psi);
                let div = if gn > 0.0 { weak_divergence(mesh, &b, m, &psi) / gn } else { 0.0 };
                (div, reconstruction_residual(mesh, &b, &phi, &psi))
            })
            .collect();
        let chi_h1 = correctors
            .chi
            .iter()
            .zip(&correctors.chi_grad)
            .map(|(x, g)| {
                let l2: f64 = (0..m)
                    .map(|a| {
                        let comp: Vec<f64> = x.iter().skip(a).step_by(m).cloned().collect();
                        mesh.l2_inner(&comp, &comp)
                    })
                    .sum();
                (l2 + g.iter().map(|v| v * v).sum::<f64>() * mesh.area()).sqrt()
            })
            .fold(0.0, f64::max);
        let chi_mean = correctors
            .chi
            .iter()
            .map(|x| (x.iter().sum::<f64>() / x.len() as f64).abs())
            .fold(0.0, f64::max);
        let diagnostics = CellDiagnostics {
            resolution: res,
            chi_h1,
            chi_mean,
            weak_residual: correctors.weak_residual,
            b_average: b.max_average(),
            b_divergence: tests.iter().map(|t| t.0).fold(0.0, f64::max),
            phi_antisymmetry: phi.antisymmetry_defect(),
            phi_reconstruction: tests.iter().map(|t| t.1).fold(0.0, f64::max),
        };
        Ok(Self {
            correctors,
            a_hat,
            b,
            phi,
            diagnostics,
        })
    }

    pub fn a_hat_matrix(&self) -> DMatrix<f64> {
        let s = self.correctors.size();
        DMatrix::from_row_slice(s, s, &self.a_hat)
    }

    /// Constant coefficient field with the homogenized tensor.
    pub fn homogenized_field(&self) -> CoefficientField {
        CoefficientField::constant_matrix(
            format!("{}-hom", self.correctors.coef.name()),
            self.correctors.m(),
            &self.a_hat,
        )
    }
}

/// Componentwise average of `A` over a ball by the tensor midpoint rule (`quad_n` per side).
pub fn average_matrix(coef: &CoefficientField, ball: &Ball, quad_n: usize) -> DMatrix<f64> {
    let nodes = ball_nodes(ball, quad_n);
    let size = coef.size();
    let first = coef.eval(nodes[0]);
    // shifting by the first sample keeps constant fields exact
    let mut acc = vec![0.0; size * size];
    let mut buf = vec![0.0; size * size];
    for x in &nodes {
        coef.eval_into(*x, &mut buf);
        for ((a, v), f) in acc.iter_mut().zip(&buf).zip(&first) {
            *a += v - f;
        }
    }
    let vals: Vec<f64> = acc
        .iter()
        .zip(&first)
        .map(|(a, f)| f + a / nodes.len() as f64)
        .collect();
    DMatrix::from_row_slice(size, size, &vals)
}

/// Whether a constant matrix satisfies the ellipticity bounds with constant `mu`.
pub fn satisfies_ellipticity(mat: &DMatrix<f64>, mu: f64) -> bool {
    let (lo, hi) = ellipticity_bounds(mat);
    lo >= mu * (1.0 - 1e-12) && hi <= (1.0 + 1e-12) / mu
}

/// Sampled VMO modulus: for each `r`, the sup over ball radii `t <= r` (from the same ladder)
/// and sampled centres of `avg_B |A - avg_B A|` (Frobenius norm).
pub fn vmo_modulus(coef: &CoefficientField, radii: &[f64], centers_per_side: usize, quad_n: usize) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = radii.to_vec();
    sorted.sort_by(f64::total_cmp);
    let centers: Vec<Point> = (0..centers_per_side * centers_per_side)
        .map(|c| {
            [
                ((c % centers_per_side) as f64 + 0.5) / centers_per_side as f64,
                ((c / centers_per_side) as f64 + 0.5) / centers_per_side as f64,
            ]
        })
        .collect();
    let per_radius: Vec<f64> = sorted
        .par_iter()
        .map(|&r| {
            centers
                .iter()
                .map(|&c| {
                    let ball = Ball::new(c, r);
                    let avg = average_matrix(coef, &ball, quad_n);
                    let nodes = ball_nodes(&ball, quad_n);
                    nodes
                        .iter()
                        .map(|x| (coef.matrix(*x) - &avg).norm())
                        .sum::<f64>()
                        / nodes.len() as f64
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let mut running: f64 = 0.0;
    sorted
        .iter()
        .zip(per_radius)
        .map(|(&r, v)| {
            running = running.max(v);
            (r, running)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Laminate profile `a(y1)` of the library coefficient, evaluated independently.
    fn laminate_a(y: f64, s: f64) -> f64 {
        2.5 + 1.5 * (s * (2.0 * std::f64::consts::PI * y).sin()).tanh() / s.tanh()
    }

    /// Composite Gauss-Legendre (5 points) on `[0, 1]` with `k` panels.
    fn integrate(f: impl Fn(f64) -> f64, k: usize) -> f64 {
        let x = [
            0.0,
            -0.538_469_310_105_683,
            0.538_469_310_105_683,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        let w = [
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
            0.236_926_885_056_189,
        ];
        let hk = 1.0 / k as f64;
        (0..k)
            .map(|p| {
                let mid = (p as f64 + 0.5) * hk;
                (0..5).map(|q| w[q] * f(mid + 0.5 * hk * x[q])).sum::<f64>() * 0.5 * hk
            })
            .sum()
    }

    fn harmonic_mean(s: f64) -> f64 {
        1.0 / integrate(|y| 1.0 / laminate_a(y, s), 4000)
    }

    #[test]
    fn periodic_mesh_structure() {
        let mesh = PeriodicMesh::new(16, DiagonalPattern::Uniform).unwrap();
        assert_eq!(mesh.n_triangles(), 512);
        let total: f64 = mesh.coords().iter().map(|c| triangle_geometry(*c).0).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(mesh.node(-1, 16), 15);
        assert!(PeriodicMesh::new(8, DiagonalPattern::Uniform).is_err());
        assert!(PeriodicMesh::new(17, DiagonalPattern::Alternating).is_err());
        // the Laplacian annihilates constants: pure periodic kernel
        let lap = laplacian(&mesh);
        let ones = vec![1.0; mesh.n_nodes()];
        assert!(lap.apply(&ones).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn locate_returns_containing_triangle() {
        for pattern in [DiagonalPattern::Uniform, DiagonalPattern::Alternating] {
            let mesh = PeriodicMesh::new(16, pattern).unwrap();
            for y in [[0.013, 0.77], [0.5, 0.5], [0.999, 0.001], [1.3, -0.2], [0.031, 0.032]] {
                let (t, b) = mesh.locate(y);
                let c = mesh.coords()[t];
                let x = [
                    b[0] * c[0][0] + b[1] * c[1][0] + b[2] * c[2][0],
                    b[0] * c[0][1] + b[1] * c[1][1] + b[2] * c[2][1],
                ];
                assert!(b.iter().all(|v| *v >= -1e-12));
                assert!((x[0] - y[0].rem_euclid(1.0)).abs() < 1e-12 && (x[1] - y[1].rem_euclid(1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_coefficients_have_zero_correctors() {
        for coef in [
            CoefficientField::identity(),
            CoefficientField::constant_matrix("c", 1, &[2.0, 0.3, 0.3, 1.0]),
        ] {
            let set = CorrectorSet::compute(&coef, 16).unwrap();
            assert!(set.diagnostics.chi_h1 < 1e-12);
            for (a, e) in set.a_hat.iter().zip(coef.eval([0.0, 0.0])) {
                assert!((a - e).abs() < 1e-14);
            }
            assert!(set.b.max_abs() < 1e-14);
            assert!(set.phi.max_abs() < 1e-12);
        }
    }

    #[test]
    fn laminate_matches_one_dimensional_oracle() {
        let s = crate::fem::coefficient::LAMINATE_SHARPNESS;
        let coef = CoefficientField::laminate();
        let c = solve_correctors(&coef, 64).unwrap();
        let a_hat = homogenize(&c);
        let harm = harmonic_mean(s);
        let arith = integrate(|y| laminate_a(y, s), 4000);
        assert!((arith - 2.5).abs() < 1e-12);
        assert!((a_hat[0] / harm - 1.0).abs() < 1e-3, "{} vs {harm}", a_hat[0]);
        assert!((a_hat[3] / arith - 1.0).abs() < 1e-3);
        assert!(a_hat[1].abs() < 1e-8 && a_hat[2].abs() < 1e-8);
        // chi_1 depends on y1 only
        let n = c.mesh.n();
        for j in 0..n {
            for i in 0..n {
                assert!((c.chi[0][j * n + i] - c.chi[0][i]).abs() < 1e-9);
            }
        }
        // against the interpolant of the oracle: chi_1' = harm / a - 1, zero mean
        let prim = |y: f64| integrate(|t| y * (harm / laminate_a(t * y, s) - 1.0), 200);
        let nodes: Vec<f64> = (0..n).map(|i| prim(i as f64 / n as f64)).collect();
        let mean = integrate(prim, 200);
        let oracle = c.mesh.interpolate(|y| nodes[(y[0] * n as f64).round() as usize % n] - mean);
        let diff: Vec<f64> = c.chi[0].iter().zip(&oracle).map(|(a, b)| a - b).collect();
        let h1 = (c.mesh.l2_inner(&diff, &diff) + gradient_norm(&c.mesh, &diff).powi(2)).sqrt();
        assert!(h1 < 1e-3, "H1 distance {h1}");
    }

    #[test]
    fn sharpening_brackets_the_step_values() {
        let mut prev = f64::INFINITY;
        for s in [1.0, 2.0, 5.0, 20.0, 200.0] {
            let h = harmonic_mean(s);
            assert!(h > 1.6 && h < prev);
            prev = h;
        }
        assert!(prev - 1.6 < 0.02);
    }

    #[test]
    fn checkerboard_identities() {
        let set = CorrectorSet::compute(&CoefficientField::checkerboard(), 32).unwrap();
        let d = set.diagnostics;
        assert!(d.chi_mean < 1e-8);
        assert!(d.weak_residual < 1e-8);
        assert!(d.b_average < 1e-6);
        assert!(d.b_divergence < 1e-4);
        assert_eq!(d.phi_antisymmetry, 0.0);
        let a = set.a_hat_matrix();
        assert!((a[(0, 1)] - a[(1, 0)]).abs() < 1e-8);
        assert!(satisfies_ellipticity(&a, CoefficientField::checkerboard().mu()));
    }

    #[test]
    fn a_hat_converges_quadratically() {
        let coef = CoefficientField::checkerboard();
        let a: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&n| homogenize(&solve_correctors(&coef, n).unwrap())[0])
            .collect();
        let ratio = (a[0] - a[1]).abs() / (a[1] - a[2]).abs();
        assert!(ratio > 3.0 && ratio < 5.0, "{a:?} {ratio}");
    }

    #[test]
    fn system_corrector_set() {
        let set = CorrectorSet::compute(&CoefficientField::system(), 16).unwrap();
        let a = set.a_hat_matrix();
        assert!((&a - a.transpose()).amax() < 1e-8);
        assert!(set.diagnostics.b_average < 1e-6);
        assert_eq!(set.diagnostics.phi_antisymmetry, 0.0);
    }

    #[test]
    fn average_matrix_examples() {
        let c = CoefficientField::constant_matrix("c", 1, &[1.3, 0.1, 0.1, 0.7]);
        let avg = average_matrix(&c, &Ball::new([0.2, 0.9], 0.3), 32);
        assert_eq!(avg, c.matrix([0.0, 0.0]));
        let cb = average_matrix(&CoefficientField::checkerboard(), &Ball::new([0.5, 0.5], 0.5), 64);
        assert!((cb[(0, 0)] - 2.0).abs() < 1e-12 && cb[(0, 1)].abs() < 1e-15);
        for coef in CoefficientField::library() {
            for ball in [Ball::new([0.1, 0.3], 0.05), Ball::new([0.6, 0.2], 0.7)] {
                assert!(satisfies_ellipticity(&average_matrix(&coef, &ball, 16), coef.mu()));
            }
        }
    }

    #[test]
    fn vmo_examples() {
        let radii = [0.01, 0.02, 0.04, 0.08, 0.16];
        let zero = vmo_modulus(&CoefficientField::identity(), &radii, 4, 16);
        assert!(zero.iter().all(|(_, v)| *v == 0.0));
        let rho = vmo_modulus(&CoefficientField::checkerboard(), &radii, 8, 16);
        assert!(rho.windows(2).all(|w| w[1].1 >= w[0].1));
        let slope = (rho[2].1 / rho[0].1).ln() / (radii[2] / radii[0]).ln();
        assert!((slope - 1.0).abs() < 0.15, "slope {slope}");
    }
}
