//! P1 finite elements for `-div(A(x/eps) grad u) = div(f) + F` with Dirichlet data.
//!
//! Element coefficients are averaged over the three edge midpoints of each triangle.
//! Degrees of freedom are interleaved: dof `v * m + a` is component `a` at vertex `v`.
//! Per-triangle vector fields use the layout `[t][a][i]` (`m * 2` values per triangle).

pub mod coefficient;
pub mod sparse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use coefficient::{CoefficientField, Profile, TrigTerm, Wave, DIM};
pub use sparse::{CsrMatrix, SolveStats, SolverConfig};

use crate::geometry::{edge_midpoints, triangle_geometry, Ball, Point, SubMesh, TriMesh};
use crate::weights::{triangle_weights, Weight, WeightError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("oscillation unresolved: h = {h} exceeds eps/8 = {limit}")]
    OscillationUnresolved { h: f64, limit: f64 },
    #[error("coefficient '{name}' failed the ellipticity spot-check at y = {at:?}")]
    CoefficientInvalid { name: String, at: Point },
    #[error("solver stalled after {iterations} iterations (relative residual {residual:e})")]
    SolverStalled { iterations: usize, residual: f64 },
    #[error("direct solve too large: {unknowns} unknowns with half bandwidth {bandwidth}")]
    DirectSolveTooLarge { unknowns: usize, bandwidth: usize },
    #[error("ball misses the domain")]
    BallMissesDomain,
    #[error("unknown coefficient '{0}'")]
    UnknownCoefficient(String),
    #[error("invalid problem data: {0}")]
    InvalidData(String),
}

/// Mesh-to-coefficient coupling: `h <= eps / MESH_PER_PERIOD`.
pub const MESH_PER_PERIOD: f64 = 8.0;

/// Largest system the nonsymmetric direct fallback accepts.
pub const MAX_DIRECT_UNKNOWNS: usize = 100_000;

/// Per-triangle average of `A(x / eps)` over the three edge midpoints.
pub fn element_coefficients(
    coords: &[[Point; 3]],
    coef: &CoefficientField,
    eps: f64,
) -> Vec<Vec<f64>> {
    let size = coef.size() * coef.size();
    coords
        .par_iter()
        .with_min_len(256)
        .map(|c| {
            let mut avg = vec![0.0; size];
            let mut buf = vec![0.0; size];
            for q in edge_midpoints(*c) {
                coef.eval_into([q[0] / eps, q[1] / eps], &mut buf);
                for (a, b) in avg.iter_mut().zip(&buf) {
                    *a += b / 3.0;
                }
            }
            avg
        })
        .collect()
}

/// Sparsity pattern coupling every pair of dofs sharing a triangle.
pub fn dof_pattern(n_nodes: usize, nodes: &[[usize; 3]], m: usize) -> CsrMatrix {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for tri in nodes {
        for &a in tri {
            adj[a].extend_from_slice(tri);
        }
    }
    let mut rows = Vec::with_capacity(n_nodes * m);
    for nbrs in adj.iter_mut() {
        nbrs.sort_unstable();
        nbrs.dedup();
        for _alpha in 0..m {
            let mut row = Vec::with_capacity(nbrs.len() * m);
            for &b in nbrs.iter() {
                for beta in 0..m {
                    row.push(b * m + beta);
                }
            }
            rows.push(row);
        }
    }
    CsrMatrix::from_pattern(rows)
}

/// Stiffness matrix `sum_T |T| Abar_T grad phi_a . grad phi_b` from per-triangle coefficients.
pub fn assemble_stiffness(
    n_nodes: usize,
    nodes: &[[usize; 3]],
    coords: &[[Point; 3]],
    element_coef: &[Vec<f64>],
    m: usize,
) -> CsrMatrix {
    let mut mat = dof_pattern(n_nodes, nodes, m);
    let n = m * DIM;
    let local: Vec<Vec<f64>> = coords
        .par_iter()
        .zip(element_coef.par_iter())
        .with_min_len(256)
        .map(|(c, abar)| {
            let (area, g) = triangle_geometry(*c);
            let k = 3 * m;
            let mut ke = vec![0.0; k * k];
            for a in 0..3 {
                for alpha in 0..m {
                    for b in 0..3 {
                        for beta in 0..m {
                            let mut s = 0.0;
                            for i in 0..DIM {
                                for j in 0..DIM {
                                    s += abar[(alpha * DIM + i) * n + beta * DIM + j] * g[a][i] * g[b][j];
                                }
                            }
                            ke[(a * m + alpha) * k + b * m + beta] = area * s;
                        }
                    }
                }
            }
            ke
        })
        .collect();
    for (tri, ke) in nodes.iter().zip(&local) {
        let k = 3 * m;
        for a in 0..3 {
            for alpha in 0..m {
                for b in 0..3 {
                    for beta in 0..m {
                        mat.add(
                            tri[a] * m + alpha,
                            tri[b] * m + beta,
                            ke[(a * m + alpha) * k + b * m + beta],
                        );
                    }
                }
            }
        }
    }
    mat
}

/// Dirichlet constraint: which vertices are fixed and the per-dof values there.
#[derive(Debug, Clone, PartialEq)]
pub struct Dirichlet {
    pub fixed: Vec<bool>,
    pub values: Vec<f64>,
}

impl Dirichlet {
    /// `u = 0` on every boundary vertex.
    pub fn homogeneous(mesh: &TriMesh, m: usize) -> Self {
        Self {
            fixed: mesh.boundary_flags().to_vec(),
            values: vec![0.0; mesh.n_vertices() * m],
        }
    }
}

/// Right-hand side data: flux `f` per triangle, body load `F` per vertex, Dirichlet data `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    pub flux: Option<Vec<f64>>,
    pub body: Option<Vec<f64>>,
    pub dirichlet: Dirichlet,
}

impl ProblemData {
    pub fn flux_only(mesh: &TriMesh, m: usize, flux: Vec<f64>) -> Self {
        Self {
            flux: Some(flux),
            body: None,
            dirichlet: Dirichlet::homogeneous(mesh, m),
        }
    }

    fn validate(&self, mesh: &TriMesh, m: usize) -> Result<(), FemError> {
        if let Some(f) = &self.flux {
            if f.len() != mesh.n_triangles() * m * DIM {
                return Err(FemError::InvalidData(format!("flux has {} values", f.len())));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(FemError::InvalidData("non-finite flux".into()));
            }
        }
        if let Some(b) = &self.body {
            if b.len() != mesh.n_vertices() * m || b.iter().any(|v| !v.is_finite()) {
                return Err(FemError::InvalidData("bad body load".into()));
            }
        }
        let d = &self.dirichlet;
        if d.fixed.len() != mesh.n_vertices() || d.values.len() != mesh.n_vertices() * m {
            return Err(FemError::InvalidData("bad Dirichlet data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AssemblyOptions {
    /// Skip the `h <= eps/8` resolution rule.
    pub allow_coarse: bool,
}

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub fixed: Vec<bool>,
    pub m: usize,
    pub symmetric: bool,
}

pub fn triangle_coords(mesh: &TriMesh) -> Vec<[Point; 3]> {
    (0..mesh.n_triangles()).map(|t| mesh.corners(t)).collect()
}

pub fn check_resolution(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    opts: AssemblyOptions,
) -> Result<(), FemError> {
    let limit = eps / MESH_PER_PERIOD;
    if !opts.allow_coarse && !coef.is_constant() && mesh.h() > limit * (1.0 + 1e-12) {
        return Err(FemError::OscillationUnresolved { h: mesh.h(), limit });
    }
    Ok(())
}

/// Assembles the Dirichlet problem with symmetric elimination of the fixed dofs.
pub fn assemble(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    data: &ProblemData,
    opts: AssemblyOptions,
) -> Result<LinearSystem, FemError> {
    if !(eps > 0.0) {
        return Err(FemError::InvalidData(format!("eps = {eps}")));
    }
    check_resolution(mesh, coef, eps, opts)?;
    coef.validate()?;
    let m = coef.m();
    data.validate(mesh, m)?;
    let coords = triangle_coords(mesh);
    let abar = element_coefficients(&coords, coef, eps);
    let mut matrix = assemble_stiffness(mesh.n_vertices(), mesh.triangles(), &coords, &abar, m);
    let mut rhs = vec![0.0; mesh.n_vertices() * m];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let (area, g) = triangle_geometry(coords[t]);
        if let Some(f) = &data.flux {
            for a in 0..3 {
                for alpha in 0..m {
                    let mut s = 0.0;
                    for i in 0..DIM {
                        s += f[(t * m + alpha) * DIM + i] * g[a][i];
                    }
                    rhs[tri[a] * m + alpha] -= area * s;
                }
            }
        }
        if let Some(body) = &data.body {
            for alpha in 0..m {
                let total: f64 = tri.iter().map(|&v| body[v * m + alpha]).sum();
                for &v in tri {
                    rhs[v * m + alpha] += area / 12.0 * (body[v * m + alpha] + total);
                }
            }
        }
    }
    let fixed: Vec<bool> = (0..mesh.n_vertices() * m)
        .map(|dof| data.dirichlet.fixed[dof / m])
        .collect();
    apply_dirichlet(&mut matrix, &mut rhs, &fixed, &data.dirichlet.values);
    let symmetric = coef.is_symmetric();
    Ok(LinearSystem {
        matrix,
        rhs,
        fixed,
        m,
        symmetric,
    })
}

/// Symmetric elimination: fixed rows and columns become identity, their couplings move
/// to the right-hand side.
pub fn apply_dirichlet(matrix: &mut CsrMatrix, rhs: &mut [f64], fixed: &[bool], values: &[f64]) {
    for r in 0..matrix.n() {
        if fixed[r] {
            continue;
        }
        let (cols, vals) = matrix.row_mut(r);
        for (c, v) in cols.iter().zip(vals.iter_mut()) {
            if fixed[*c] {
                rhs[r] -= *v * values[*c];
                *v = 0.0;
            }
        }
    }
    for r in 0..matrix.n() {
        if !fixed[r] {
            continue;
        }
        let (cols, vals) = matrix.row_mut(r);
        for (c, v) in cols.iter().zip(vals.iter_mut()) {
            *v = if *c == r { 1.0 } else { 0.0 };
        }
        rhs[r] = values[r];
    }
}

/// Solves an assembled system: PCG when symmetric, banded elimination otherwise.
pub fn solve(system: &LinearSystem, config: SolverConfig) -> Result<(Vec<f64>, SolveStats), FemError> {
    let n = system.matrix.n();
    if system.symmetric {
        let mut x: Vec<f64> = (0..n)
            .map(|i| if system.fixed[i] { system.rhs[i] } else { 0.0 })
            .collect();
        if system.rhs.iter().all(|&v| v == 0.0) {
            return Ok((vec![0.0; n], SolveStats::default()));
        }
        let stats = sparse::pcg(&system.matrix, &system.rhs, &mut x, config, None)?;
        Ok((x, stats))
    } else {
        if n > MAX_DIRECT_UNKNOWNS {
            return Err(FemError::DirectSolveTooLarge {
                unknowns: n,
                bandwidth: system.matrix.bandwidth(),
            });
        }
        let x = sparse::banded_lu_solve(&system.matrix, &system.rhs)?;
        let ax = system.matrix.apply(&x);
        let r: Vec<f64> = system.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let bnorm = sparse::norm(&system.rhs);
        let residual = if bnorm > 0.0 { sparse::norm(&r) / bnorm } else { 0.0 };
        Ok((x, SolveStats { iterations: 1, residual }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FemSolution {
    pub m: usize,
    /// Nodal values, interleaved by component.
    pub values: Vec<f64>,
    /// Per-triangle gradients, layout `[t][a][i]`.
    pub gradients: Vec<f64>,
    pub stats: SolveStats,
}

/// Exact P1 gradient per triangle, layout `[t][a][i]`.
pub fn gradient(values: &[f64], m: usize, mesh: &TriMesh) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_triangles() * m * DIM];
    out.par_chunks_mut(m * DIM)
        .with_min_len(256)
        .enumerate()
        .for_each(|(t, chunk)| {
            let (_, g) = triangle_geometry(mesh.corners(t));
            let tri = mesh.triangles()[t];
            for alpha in 0..m {
                for i in 0..DIM {
                    chunk[alpha * DIM + i] = (0..3).map(|a| values[tri[a] * m + alpha] * g[a][i]).sum();
                }
            }
        });
    out
}

/// Assemble, solve and differentiate in one step.
pub fn solve_problem(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    data: &ProblemData,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<FemSolution, FemError> {
    let system = assemble(mesh, coef, eps, data, opts)?;
    let (values, stats) = solve(&system, config)?;
    let gradients = gradient(&values, coef.m(), mesh);
    Ok(FemSolution {
        m: coef.m(),
        values,
        gradients,
        stats,
    })
}

/// `sum_T |field_T|^2 w_T |T|` with precomputed triangle weights, optionally restricted to
/// a set of triangles. Returns the squared norm.
pub fn weighted_norm_with(
    field: &[f64],
    components: usize,
    mesh: &TriMesh,
    tri_weights: &[f64],
    region: Option<&[usize]>,
) -> f64 {
    let term = |t: usize| {
        let v = &field[t * components..(t + 1) * components];
        v.iter().map(|x| x * x).sum::<f64>() * tri_weights[t] * mesh.area(t)
    };
    match region {
        Some(ts) => ts.iter().map(|&t| term(t)).sum(),
        None => (0..mesh.n_triangles()).map(term).sum(),
    }
}

/// Squared weighted L2 norm of a per-triangle field with `components` values per triangle.
pub fn weighted_norm(
    field: &[f64],
    components: usize,
    w: &Weight,
    mesh: &TriMesh,
    region: Option<&[usize]>,
) -> Result<f64, WeightError> {
    let tw = triangle_weights(mesh, w)?;
    Ok(weighted_norm_with(field, components, mesh, &tw, region))
}

/// Boundary data on the artificial part of `partial(4B) cap Omega` for local solves.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalData {
    Zero,
    /// Component `a` equals `slopes[a] . x`.
    Linear(Vec<[f64; 2]>),
    /// Seeded random low-frequency trigonometric trace.
    RandomSmooth { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub sub: SubMesh,
    pub solution: FemSolution,
}

/// Random smooth function on the scale of `ball`: a sum of four plane waves with
/// integer wave vectors in `[-2, 2]^2` relative to the ball's radius.
pub fn random_smooth_trace(seed: u64, m: usize, ball: &Ball) -> impl Fn(Point, usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<Vec<(f64, [f64; 2], f64)>> = (0..m)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let amp = rng.gen_range(-1.0..1.0);
                    let k = [rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64];
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    (amp, k, phase)
                })
                .collect()
        })
        .collect();
    let c = ball.center;
    let scale = std::f64::consts::PI / (4.0 * ball.radius);
    move |x: Point, alpha: usize| {
        waves[alpha]
            .iter()
            .map(|(a, k, ph)| a * ((k[0] * (x[0] - c[0]) + k[1] * (x[1] - c[1])) * scale + ph).cos())
            .sum()
    }
}

/// Solves `div(A(x/eps) grad u) = 0` on the triangles of `4B cap Omega` with `u = 0` on
/// the domain boundary and `data` on the rest of the submesh boundary.
pub fn solve_local(
    mesh: &TriMesh,
    ball: &Ball,
    coef: &CoefficientField,
    eps: f64,
    data: &LocalData,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<LocalSolution, FemError> {
    let big = ball.scaled(4.0);
    let sub = mesh.submesh(|t| big.contains(mesh.centroid(t)));
    if sub.mesh.n_triangles() == 0 {
        return Err(FemError::BallMissesDomain);
    }
    let m = coef.m();
    let outer = sub.mesh.outer_vertices();
    let trace = match data {
        LocalData::RandomSmooth { seed } => Some(random_smooth_trace(*seed, m, ball)),
        _ => None,
    };
    let mut fixed = vec![false; sub.mesh.n_vertices()];
    let mut values = vec![0.0; sub.mesh.n_vertices() * m];
    for v in 0..sub.mesh.n_vertices() {
        let on_domain_boundary = sub.mesh.is_boundary(v);
        if !(outer[v] || on_domain_boundary) {
            continue;
        }
        fixed[v] = true;
        if on_domain_boundary {
            continue;
        }
        let x = sub.mesh.vertices()[v];
        for alpha in 0..m {
            values[v * m + alpha] = match data {
                LocalData::Zero => 0.0,
                LocalData::Linear(slopes) => slopes[alpha][0] * x[0] + slopes[alpha][1] * x[1],
                LocalData::RandomSmooth { .. } => trace.as_ref().unwrap()(x, alpha),
            };
        }
    }
    let problem = ProblemData {
        flux: None,
        body: None,
        dirichlet: Dirichlet { fixed, values },
    };
    let solution = solve_problem(&sub.mesh, coef, eps, &problem, opts, config)?;
    Ok(LocalSolution { sub, solution })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{triangulate, PolygonDomain};
    use std::f64::consts::PI;

    fn flux_from(mesh: &TriMesh, f: impl Fn(Point) -> [f64; 2]) -> Vec<f64> {
        (0..mesh.n_triangles())
            .flat_map(|t| f(mesh.centroid(t)))
            .collect()
    }

    #[test]
    fn reference_element_matrix() {
        // hand integration on the unit reference triangle with A = I
        let coords = [[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]];
        let abar = element_coefficients(&coords, &CoefficientField::identity(), 1.0);
        let k = assemble_stiffness(3, &[[0, 1, 2]], &coords, &abar, 1);
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for r in 0..3 {
            for c in 0..3 {
                assert!((k.get(r, c) - expected[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 0.125).unwrap();
        let coords = triangle_coords(&mesh);
        let abar = element_coefficients(&coords, &CoefficientField::identity(), 1.0);
        let k = assemble_stiffness(mesh.n_vertices(), mesh.triangles(), &coords, &abar, 1);
        for r in 0..k.n() {
            let s: f64 = k.row(r).map(|(_, v)| v).sum();
            assert!(s.abs() < 1e-12);
        }
        assert!(k.is_symmetric(1e-15));
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 0.125).unwrap();
        let data = ProblemData::flux_only(&mesh, 1, vec![0.0; mesh.n_triangles() * 2]);
        let sys = assemble(&mesh, &CoefficientField::identity(), 1.0, &data, Default::default()).unwrap();
        assert!(sys.rhs.iter().all(|&v| v == 0.0));
        let sol = solve_problem(
            &mesh,
            &CoefficientField::identity(),
            1.0,
            &data,
            Default::default(),
            SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.stats.iterations, 0);
        assert!(sol.values.iter().all(|&v| v == 0.0));
    }

    fn manufactured_errors(n: usize) -> (f64, f64) {
        // u = v = sin(pi x) sin(pi y) solves -div grad u = div f with f = -grad v
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / n as f64).unwrap();
        let v = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin();
        let gv = |x: Point| {
            [
                PI * (PI * x[0]).cos() * (PI * x[1]).sin(),
                PI * (PI * x[0]).sin() * (PI * x[1]).cos(),
            ]
        };
        // exact cell average of -grad v is approximated by the 3-midpoint rule
        let flux: Vec<f64> = (0..mesh.n_triangles())
            .flat_map(|t| {
                let mids = edge_midpoints(mesh.corners(t));
                let mut f = [0.0; 2];
                for q in mids {
                    let g = gv(q);
                    f[0] -= g[0] / 3.0;
                    f[1] -= g[1] / 3.0;
                }
                f
            })
            .collect();
        let data = ProblemData::flux_only(&mesh, 1, flux);
        let sol = solve_problem(
            &mesh,
            &CoefficientField::identity(),
            1.0,
            &data,
            Default::default(),
            SolverConfig { tol: 1e-12, max_iter: 10_000 },
        )
        .unwrap();
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for t in 0..mesh.n_triangles() {
            let area = mesh.area(t);
            let tri = mesh.triangles()[t];
            let c = mesh.corners(t);
            for (k, q) in edge_midpoints(c).iter().enumerate() {
                let uh = 0.5 * (sol.values[tri[k]] + sol.values[tri[(k + 1) % 3]]);
                l2 += area / 3.0 * (uh - v(*q)).powi(2);
                let g = gv(*q);
                h1 += area / 3.0
                    * ((sol.gradients[2 * t] - g[0]).powi(2) + (sol.gradients[2 * t + 1] - g[1]).powi(2));
            }
        }
        (l2.sqrt(), h1.sqrt())
    }

    #[test]
    fn manufactured_solution_converges() {
        let (l2a, h1a) = manufactured_errors(16);
        let (l2b, h1b) = manufactured_errors(32);
        let h1_rate = (h1a / h1b).log2();
        let l2_rate = (l2a / l2b).log2();
        assert!((h1_rate - 1.0).abs() < 0.2, "H1 rate {h1_rate}");
        assert!(l2_rate > 1.8, "L2 rate {l2_rate}");
    }

    #[test]
    fn gradient_of_linear_is_exact() {
        let mesh = triangulate(&PolygonDomain::l_shape(), 0.125).unwrap();
        let vals: Vec<f64> = mesh.vertices().iter().map(|x| 2.0 * x[0] - 3.0 * x[1] + 1.0).collect();
        let g = gradient(&vals, 1, &mesh);
        for t in 0..mesh.n_triangles() {
            assert!((g[2 * t] - 2.0).abs() < 1e-12 && (g[2 * t + 1] + 3.0).abs() < 1e-12);
        }
        assert!(gradient(&vec![0.0; mesh.n_vertices()], 1, &mesh).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn energy_estimate_holds() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / 32.0).unwrap();
        let coef = CoefficientField::checkerboard();
        let flux = flux_from(&mesh, |x| [(7.0 * x[0]).sin() + x[1], (3.0 * x[1] * x[0]).cos()]);
        let data = ProblemData::flux_only(&mesh, 1, flux.clone());
        let sol = solve_problem(&mesh, &coef, 0.25, &data, Default::default(), SolverConfig::default()).unwrap();
        let lhs = weighted_norm(&sol.gradients, 2, &Weight::constant(1.0), &mesh, None).unwrap();
        let rhs = weighted_norm(&flux, 2, &Weight::constant(1.0), &mesh, None).unwrap();
        assert!(lhs <= rhs / coef.mu().powi(2));
    }

    #[test]
    fn oscillation_rule_enforced() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / 16.0).unwrap();
        let data = ProblemData::flux_only(&mesh, 1, vec![1.0; mesh.n_triangles() * 2]);
        let r = assemble(&mesh, &CoefficientField::checkerboard(), 0.25, &data, Default::default());
        assert!(matches!(r, Err(FemError::OscillationUnresolved { .. })));
        assert!(assemble(
            &mesh,
            &CoefficientField::checkerboard(),
            0.25,
            &data,
            AssemblyOptions { allow_coarse: true }
        )
        .is_ok());
        let bad = CoefficientField::isotropic("bad", Profile::constant(1.0), 3.0);
        assert!(matches!(
            assemble(&mesh, &bad, 1.0, &data, Default::default()),
            Err(FemError::CoefficientInvalid { .. })
        ));
    }

    #[test]
    fn nonsymmetric_constant_system_uses_direct_solver() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / 16.0).unwrap();
        let coef = CoefficientField::constant_matrix("skew", 1, &[1.0, 0.4, -0.4, 1.0]);
        // a linear function solves every constant-coefficient problem with zero flux
        let mut dirichlet = Dirichlet::homogeneous(&mesh, 1);
        for (v, x) in mesh.vertices().iter().enumerate() {
            dirichlet.values[v] = 0.5 * x[0] - x[1];
        }
        let data = ProblemData {
            flux: None,
            body: None,
            dirichlet,
        };
        let sys = assemble(&mesh, &coef, 1.0, &data, Default::default()).unwrap();
        assert!(!sys.symmetric);
        let (x, stats) = solve(&sys, SolverConfig::default()).unwrap();
        assert!(stats.residual < 1e-12);
        for (v, p) in mesh.vertices().iter().enumerate() {
            assert!((x[v] - (0.5 * p[0] - p[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / 64.0).unwrap();
        let ones = vec![1.0; mesh.n_triangles()];
        let area = weighted_norm(&ones, 1, &Weight::constant(1.0), &mesh, None).unwrap();
        assert!((area - 1.0).abs() < 1e-12);
        let w1 = Weight::distance_unchecked(mesh.domain().clone(), 1.0);
        let val = weighted_norm(&ones, 1, &w1, &mesh, None).unwrap();
        // 4 int_0^{1/2} t (1 - 2t) dt = 1/6
        assert!((val - 1.0 / 6.0).abs() < mesh.h(), "{val}");
        let layer = crate::geometry::boundary_layer(&mesh, 0.1);
        let v = weighted_norm(&ones, 1, &Weight::constant(1.0), &mesh, Some(&layer)).unwrap();
        assert!((v - 0.36).abs() < 2.0 * mesh.h());
    }

    #[test]
    fn local_solves() {
        let mesh = triangulate(&PolygonDomain::unit_square(), 1.0 / 64.0).unwrap();
        let ball = Ball::new([0.5, 0.5], 0.05);
        let id = CoefficientField::identity();
        let cfg = SolverConfig { tol: 1e-13, max_iter: 5000 };
        let zero = solve_local(&mesh, &ball, &id, 1.0, &LocalData::Zero, Default::default(), cfg).unwrap();
        assert!(zero.solution.values.iter().all(|&v| v == 0.0));
        let lin = solve_local(
            &mesh,
            &ball,
            &id,
            1.0,
            &LocalData::Linear(vec![[1.5, -0.5]]),
            Default::default(),
            cfg,
        )
        .unwrap();
        for (v, x) in lin.sub.mesh.vertices().iter().enumerate() {
            assert!((lin.solution.values[v] - (1.5 * x[0] - 0.5 * x[1])).abs() < 1e-10);
        }
        // discrete maximum principle on a boundary ball
        let bball = Ball::new([0.5, 0.0], 0.05);
        let sol = solve_local(
            &mesh,
            &bball,
            &id,
            1.0,
            &LocalData::RandomSmooth { seed: 3 },
            Default::default(),
            cfg,
        )
        .unwrap();
        let outer = sol.sub.mesh.outer_vertices();
        let (mut bmin, mut bmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in 0..sol.sub.mesh.n_vertices() {
            if outer[v] {
                bmin = bmin.min(sol.solution.values[v]);
                bmax = bmax.max(sol.solution.values[v]);
            }
        }
        for &u in &sol.solution.values {
            assert!(u >= bmin - 1e-10 && u <= bmax + 1e-10);
        }
        let far = Ball::new([5.0, 5.0], 0.05);
        assert!(matches!(
            solve_local(&mesh, &far, &id, 1.0, &LocalData::Zero, Default::default(), cfg),
            Err(FemError::BallMissesDomain)
        ));
    }
}
