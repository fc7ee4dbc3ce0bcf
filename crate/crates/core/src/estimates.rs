//! Measured constants of the weighted estimates: sup-over-trials ratios for the Dirichlet
//! problem, reverse-Hölder probes on local solutions, two-scale expansion errors, Hardy
//! ratios and the good-lambda decomposition probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cell::{CellError, CorrectorSet};
use crate::fem::{
    self, solve_local, solve_problem, weighted_norm_with, AssemblyOptions, CoefficientField, Dirichlet, FemError,
    LocalData, LocalSolution, ProblemData, SolverConfig, DIM,
};
use crate::geometry::{
    barycentric, boundary_layer, build_cutoff_unchecked, triangulate, Ball, BallSpec, DiagonalPattern,
    GeometryError, Point, PolygonDomain, TriMesh,
};
use crate::weights::{make_distance_weight, triangle_weights, Weight, WeightError};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("every trial was degenerate")]
    NoTrials,
    #[error("insufficient data: {0} valid points, at least 3 needed")]
    InsufficientData(usize),
    #[error("ladder and error lists must have equal length and a strictly decreasing ladder")]
    InvalidLadder,
    #[error("mesh spacing {h} exceeds {limit}")]
    Resolution { h: f64, limit: f64 },
    #[error("eps/h = {0} is not an even integer of at least 16")]
    CellMismatch(f64),
    #[error("trial {0} does not vanish on the boundary")]
    TrialNotVanishing(String),
}

/// Sup over a trial family of a normalized ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimate {
    pub inequality: String,
    pub constant: f64,
    /// Trials that entered the sup (degenerate ones excluded).
    pub trials: usize,
    pub worst_trial: String,
    pub config_hash: String,
}

impl ConstantEstimate {
    fn from_ratios(inequality: &str, ratios: impl IntoIterator<Item = (String, f64)>) -> Result<Self, EstimateError> {
        let mut best: Option<(String, f64)> = None;
        let mut trials = 0;
        for (id, r) in ratios {
            trials += 1;
            if best.as_ref().is_none_or(|b| r > b.1) {
                best = Some((id, r));
            }
        }
        let (worst_trial, constant) = best.ok_or(EstimateError::NoTrials)?;
        Ok(Self {
            inequality: inequality.to_string(),
            constant,
            trials,
            worst_trial,
            config_hash: String::new(),
        })
    }

    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FluxGenerator {
    /// Four plane waves per component, integer wave vectors in `[-3, 3]^2`.
    Trig,
    /// Constant random vectors on a 4x4 grid over the bounding box.
    Piecewise,
}

impl FluxGenerator {
    pub fn as_str(self) -> &'static str {
        match self {
            FluxGenerator::Trig => "trig",
            FluxGenerator::Piecewise => "piecewise",
        }
    }
}

/// Trial `k` of a family uses seed `seed + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhsFamily {
    pub count: usize,
    pub seed: u64,
    pub generator: FluxGenerator,
}

const PIECES: usize = 4;

/// Random flux `f` per triangle, layout `[t][a][i]`.
pub fn trial_flux(mesh: &TriMesh, m: usize, generator: FluxGenerator, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = mesh.domain().bbox();
    let ext = bb.width().max(bb.height());
    let local = |x: Point| [(x[0] - bb.min[0]) / ext, (x[1] - bb.min[1]) / ext];
    let comps = m * DIM;
    let mut out = vec![0.0; mesh.n_triangles() * comps];
    match generator {
        FluxGenerator::Trig => {
            let waves: Vec<Vec<(f64, [f64; 2], f64)>> = (0..comps)
                .map(|_| {
                    (0..4)
                        .map(|_| {
                            let k = [rng.gen_range(-3..=3) as f64, rng.gen_range(-3..=3) as f64];
                            (rng.gen_range(-1.0..1.0), k, rng.gen_range(0.0..std::f64::consts::TAU))
                        })
                        .collect()
                })
                .collect();
            for t in 0..mesh.n_triangles() {
                let y = local(mesh.centroid(t));
                for (c, w) in waves.iter().enumerate() {
                    out[t * comps + c] = w
                        .iter()
                        .map(|(a, k, ph)| a * (std::f64::consts::TAU * (k[0] * y[0] + k[1] * y[1]) + ph).cos())
                        .sum();
                }
            }
        }
        FluxGenerator::Piecewise => {
            let table: Vec<f64> = (0..PIECES * PIECES * comps).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for t in 0..mesh.n_triangles() {
                let y = local(mesh.centroid(t));
                let i = ((y[0] * PIECES as f64) as usize).min(PIECES - 1);
                let j = ((y[1] * PIECES as f64) as usize).min(PIECES - 1);
                let cell = j * PIECES + i;
                out[t * comps..(t + 1) * comps].copy_from_slice(&table[cell * comps..(cell + 1) * comps]);
            }
        }
    }
    out
}

/// Flux `b(x) (1, 1/2)` in every component with `b = (1 - |x - c|^2 / r^2)^2` on `ball`
/// and 0 outside, so the data lives away from the boundary when the ball does.
pub fn interior_flux(mesh: &TriMesh, m: usize, ball: &Ball) -> Vec<f64> {
    (0..mesh.n_triangles())
        .flat_map(|t| {
            let x = mesh.centroid(t);
            let s = ((x[0] - ball.center[0]).powi(2) + (x[1] - ball.center[1]).powi(2)) / (ball.radius * ball.radius);
            let b = if s < 1.0 { (1.0 - s).powi(2) } else { 0.0 };
            (0..m).flat_map(move |_| [b, 0.5 * b])
        })
        .collect()
}

fn squared_sum(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Sup over the family of `||grad u||_w^2 / ||f||_w^2` for every weight in `weights`,
/// where `-div(A(x/eps) grad u) = div f` with `u = 0` on the boundary. Each trial is solved
/// once and shared by all weights.
pub fn dirichlet_ratios(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    weights: &[Weight],
    family: &RhsFamily,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<Vec<ConstantEstimate>, EstimateError> {
    fem::check_resolution(mesh, coef, eps, opts)?;
    let tws: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| triangle_weights(mesh, w))
        .collect::<Result<_, _>>()?;
    let comps = coef.m() * DIM;
    let per_trial: Vec<Option<Vec<f64>>> = (0..family.count)
        .into_par_iter()
        .map(|k| -> Result<Option<Vec<f64>>, EstimateError> {
            let mut f = trial_flux(mesh, coef.m(), family.generator, family.seed.wrapping_add(k as u64));
            let norm: f64 = (0..mesh.n_triangles())
                .map(|t| squared_sum(&f[t * comps..(t + 1) * comps]) * mesh.area(t))
                .sum();
            if norm == 0.0 {
                return Ok(None);
            }
            let s = norm.sqrt().recip();
            f.iter_mut().for_each(|v| *v *= s);
            let data = ProblemData::flux_only(mesh, coef.m(), f);
            let sol = solve_problem(mesh, coef, eps, &data, opts, config)?;
            let f = data.flux.as_deref().unwrap_or_default();
            Ok(Some(
                tws.iter()
                    .map(|tw| {
                        let fw = weighted_norm_with(f, comps, mesh, tw, None);
                        weighted_norm_with(&sol.gradients, comps, mesh, tw, None) / fw
                    })
                    .collect(),
            ))
        })
        .collect::<Result<_, _>>()?;
    (0..weights.len())
        .map(|i| {
            ConstantEstimate::from_ratios(
                "dirichlet",
                per_trial.iter().enumerate().filter_map(|(k, r)| {
                    r.as_ref().map(|r| (format!("{}#{}", family.generator.as_str(), k), r[i]))
                }),
            )
        })
        .collect()
}

pub fn estimate_dirichlet_constant(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    w: &Weight,
    family: &RhsFamily,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<ConstantEstimate, EstimateError> {
    let mut out = dirichlet_ratios(mesh, coef, eps, std::slice::from_ref(w), family, opts, config)?;
    Ok(out.remove(0))
}

/// Triangles of the local submesh whose centroid lies in `ball`.
fn triangles_in(sol: &LocalSolution, ball: &Ball) -> Vec<usize> {
    let mesh = &sol.sub.mesh;
    (0..mesh.n_triangles()).filter(|&t| ball.contains(mesh.centroid(t))).collect()
}

/// `|grad u|^2` per triangle of a local solution.
fn local_energy_density(sol: &LocalSolution) -> Vec<f64> {
    let w = sol.solution.m * DIM;
    sol.solution.gradients.chunks(w).map(squared_sum).collect()
}

/// `[avg_{B cap Omega} |grad u|^2 w] / [avg_{2B cap Omega} |grad u|^2 * avg_{B cap Omega} w]`
/// with `tw` the triangle weights of the parent mesh. `None` when a set is empty or the
/// gradient vanishes on `2B`.
pub fn reverse_holder_ratio(sol: &LocalSolution, ball: &Ball, tw: &[f64]) -> Option<f64> {
    let mesh = &sol.sub.mesh;
    let g2 = local_energy_density(sol);
    let inner = triangles_in(sol, ball);
    let outer = triangles_in(sol, &ball.scaled(2.0));
    if inner.is_empty() || outer.is_empty() {
        return None;
    }
    let w = |t: usize| tw[sol.sub.parent_triangle[t]];
    let area_in: f64 = inner.iter().map(|&t| mesh.area(t)).sum();
    let area_out: f64 = outer.iter().map(|&t| mesh.area(t)).sum();
    let lhs = inner.iter().map(|&t| g2[t] * w(t) * mesh.area(t)).sum::<f64>() / area_in;
    let grad_avg = outer.iter().map(|&t| g2[t] * mesh.area(t)).sum::<f64>() / area_out;
    let w_avg = inner.iter().map(|&t| w(t) * mesh.area(t)).sum::<f64>() / area_in;
    if grad_avg == 0.0 {
        return None;
    }
    Some(lhs / (grad_avg * w_avg))
}

/// `(avg_B G^p)^{1/p} / (avg_{2B} G^2)^{1/2}` with `G = |grad u| w^{1/2}`.
pub fn higher_integrability_ratio(sol: &LocalSolution, ball: &Ball, tw: &[f64], p: f64) -> Option<f64> {
    let mesh = &sol.sub.mesh;
    let g2 = local_energy_density(sol);
    let inner = triangles_in(sol, ball);
    let outer = triangles_in(sol, &ball.scaled(2.0));
    if inner.is_empty() || outer.is_empty() {
        return None;
    }
    let gw2 = |t: usize| g2[t] * tw[sol.sub.parent_triangle[t]];
    let avg = |set: &[usize], f: &dyn Fn(usize) -> f64| {
        set.iter().map(|&t| f(t) * mesh.area(t)).sum::<f64>() / set.iter().map(|&t| mesh.area(t)).sum::<f64>()
    };
    let den = avg(&outer, &|t| gw2(t)).sqrt();
    if den == 0.0 {
        return None;
    }
    let num = avg(&inner, &|t| gw2(t).powf(p / 2.0)).powf(1.0 / p);
    Some(num / den)
}

/// Local solutions with random smooth traces; trial `k` of ball `b` uses seed
/// `seed + b * trials + k`. Ordered by ball, then trial.
#[allow(clippy::too_many_arguments)]
pub fn random_local_solutions(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    balls: &[BallSpec],
    trials: usize,
    seed: u64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<Vec<LocalSolution>, EstimateError> {
    (0..balls.len() * trials)
        .into_par_iter()
        .map(|idx| {
            let data = LocalData::RandomSmooth {
                seed: seed.wrapping_add(idx as u64),
            };
            Ok(solve_local(mesh, &balls[idx / trials].ball, coef, eps, &data, opts, config)?)
        })
        .collect()
}

fn trial_id(balls: &[BallSpec], trials: usize, idx: usize) -> String {
    format!("{}#{}/{}", balls[idx / trials].kind.as_str(), idx / trials, idx % trials)
}

/// Sup over (ball, trial) of [`reverse_holder_ratio`].
#[allow(clippy::too_many_arguments)]
pub fn check_reverse_holder(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    w: &Weight,
    balls: &[BallSpec],
    trials: usize,
    seed: u64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<ConstantEstimate, EstimateError> {
    let tw = triangle_weights(mesh, w)?;
    let sols = random_local_solutions(mesh, coef, eps, balls, trials, seed, opts, config)?;
    ConstantEstimate::from_ratios(
        "reverse_holder",
        sols.iter().enumerate().filter_map(|(idx, s)| {
            reverse_holder_ratio(s, &balls[idx / trials].ball, &tw).map(|r| (trial_id(balls, trials, idx), r))
        }),
    )
}

pub const HIGHER_INTEGRABILITY_LADDER: [f64; 4] = [2.25, 2.5, 3.0, 4.0];
pub const HIGHER_INTEGRABILITY_CAP: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherIntegrability {
    /// `(p, sup constant)` for every rung.
    pub constants: Vec<(f64, f64)>,
    pub cap: f64,
    /// Largest `p` whose constant, and that of every smaller rung, stays under the cap.
    pub passing: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn probe_higher_integrability(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    w: &Weight,
    balls: &[BallSpec],
    trials: usize,
    seed: u64,
    ladder: &[f64],
    cap: f64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<HigherIntegrability, EstimateError> {
    let tw = triangle_weights(mesh, w)?;
    let sols = random_local_solutions(mesh, coef, eps, balls, trials, seed, opts, config)?;
    let mut constants = Vec::with_capacity(ladder.len());
    let mut passing = None;
    let mut ok = true;
    for &p in ladder {
        let c = ConstantEstimate::from_ratios(
            "higher_integrability",
            sols.iter().enumerate().filter_map(|(idx, s)| {
                higher_integrability_ratio(s, &balls[idx / trials].ball, &tw, p).map(|r| (String::new(), r))
            }),
        )?
        .constant;
        constants.push((p, c));
        ok = ok && c <= cap;
        if ok {
            passing = Some(p);
        }
    }
    Ok(HigherIntegrability { constants, cap, passing })
}

/// Mesh cells per period required by [`two_scale_error`].
pub const TWO_SCALE_PER_PERIOD: f64 = 16.0;

/// L2 norms from one two-scale comparison (not squared).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleError {
    pub eps: f64,
    pub h: f64,
    pub grad_u_eps: f64,
    pub grad_u0: f64,
    /// `||grad w_eps||` with `w_eps = u_eps - u_0 - eps chi(x/eps) (eta grad u_0)`.
    pub grad_w: f64,
    /// `||grad u_eps - grad u_0 - (grad chi)(x/eps) eta grad u_0||`.
    pub corrector_error: f64,
    /// `||grad u_0||` on the layer within `5 eps` of the boundary.
    pub layer_grad_u0: f64,
    /// `eps ||grad^2 u_0||` away from the layer within `4 eps` of the boundary.
    pub hessian_term: f64,
    /// `grad_w / (layer_grad_u0 + hessian_term)`.
    pub implied_c: f64,
}

/// Area-weighted nodal average of a per-triangle field with `comps` values per triangle.
pub fn recovered_nodal(mesh: &TriMesh, field: &[f64], comps: usize) -> Vec<f64> {
    let mut acc = vec![0.0; mesh.n_vertices() * comps];
    let mut weight = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let a = mesh.area(t);
        for &v in tri {
            weight[v] += a;
            for c in 0..comps {
                acc[v * comps + c] += a * field[t * comps + c];
            }
        }
    }
    for (v, w) in weight.iter().enumerate() {
        if *w > 0.0 {
            acc[v * comps..(v + 1) * comps].iter_mut().for_each(|x| *x /= w);
        }
    }
    acc
}

/// Solves with `A(x/eps)` and with the homogenized matrix on the same mesh and measures the
/// two-scale expansion. The correctors are computed on a periodic mesh matched to the domain
/// mesh (`eps/h` cells per side, alternating diagonals), so the corrector terms are exact
/// mesh functions when the domain mesh comes from `triangulate` with its corner at a
/// multiple of `eps`.
pub fn two_scale_error(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    data: &ProblemData,
    config: SolverConfig,
) -> Result<TwoScaleError, EstimateError> {
    let h = mesh.h();
    let limit = eps / TWO_SCALE_PER_PERIOD;
    if h > limit * (1.0 + 1e-12) {
        return Err(EstimateError::Resolution { h, limit });
    }
    let ratio = eps / h;
    let res = ratio.round() as usize;
    if (ratio - res as f64).abs() > 1e-9 * ratio || !res.is_multiple_of(2) {
        return Err(EstimateError::CellMismatch(ratio));
    }
    let cells = CorrectorSet::compute_with(coef, res, DiagonalPattern::Alternating)?;
    let hom = cells.homogenized_field();
    let opts = AssemblyOptions::default();
    let u_eps = solve_problem(mesh, coef, eps, data, opts, config)?;
    let u0 = solve_problem(mesh, &hom, eps, data, opts, config)?;
    let eta = build_cutoff_unchecked(mesh, eps)?;
    let m = coef.m();
    let comps = m * DIM;
    let size = coef.size();
    let chi = &cells.correctors;

    let corrector_error = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let c = mesh.centroid(t);
            let y = [c[0] / eps, c[1] / eps];
            let tri = mesh.triangles()[t];
            let eta_t = tri.iter().map(|&v| eta[v]).sum::<f64>() / 3.0;
            let g0 = &u0.gradients[t * comps..(t + 1) * comps];
            let ge = &u_eps.gradients[t * comps..(t + 1) * comps];
            let mut diff: Vec<f64> = ge.iter().zip(g0).map(|(a, b)| a - b).collect();
            for col in 0..size {
                let gc = chi.grad_chi_at(y, col);
                let s = eta_t * g0[col];
                for (d, g) in diff.iter_mut().zip(gc) {
                    *d -= g * s;
                }
            }
            squared_sum(&diff) * mesh.area(t)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum::<f64>()
        .sqrt();

    let g0_nodal = recovered_nodal(mesh, &u0.gradients, comps);
    let w: Vec<f64> = (0..mesh.n_vertices())
        .into_par_iter()
        .flat_map_iter(|v| {
            let x = mesh.vertices()[v];
            let y = [x[0] / eps, x[1] / eps];
            let mut out: Vec<f64> = (0..m).map(|a| u_eps.values[v * m + a] - u0.values[v * m + a]).collect();
            for col in 0..size {
                let s = eps * eta[v] * g0_nodal[v * comps + col];
                if s != 0.0 {
                    for (o, c) in out.iter_mut().zip(chi.chi_at(y, col)) {
                        *o -= c * s;
                    }
                }
            }
            out
        })
        .collect();
    let grad_w = fem::gradient(&w, m, mesh);
    let norm = |field: &[f64], k: usize, set: Option<&[usize]>| weighted_norm_with(field, k, mesh, &vec![1.0; mesh.n_triangles()], set).sqrt();

    let layer = boundary_layer(mesh, 5.0 * eps);
    let interior: Vec<usize> = (0..mesh.n_triangles())
        .filter(|&t| mesh.domain().distance_to_boundary(mesh.centroid(t)) >= 4.0 * eps)
        .collect();
    let hessian = fem::gradient(&g0_nodal, comps, mesh);
    let grad_w_norm = norm(&grad_w, comps, None);
    let layer_grad_u0 = norm(&u0.gradients, comps, Some(&layer));
    let hessian_term = eps * norm(&hessian, comps * DIM, Some(&interior));
    let bound = layer_grad_u0 + hessian_term;
    let implied_c = if bound > 0.0 {
        grad_w_norm / bound
    } else if grad_w_norm > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(TwoScaleError {
        eps,
        h,
        grad_u_eps: norm(&u_eps.gradients, comps, None),
        grad_u0: norm(&u0.gradients, comps, None),
        grad_w: grad_w_norm,
        corrector_error,
        layer_grad_u0,
        hessian_term,
        implied_c,
    })
}

/// Least-squares fit `log e = kappa log eps + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub ladder: Vec<f64>,
    pub errors: Vec<f64>,
    pub kappa: f64,
    pub intercept: f64,
    /// Root mean square of the residuals in natural-log units.
    pub residual: f64,
}

/// Nonpositive or non-finite errors are dropped before fitting.
pub fn fit_rate(ladder: &[f64], errors: &[f64]) -> Result<RateFit, EstimateError> {
    if ladder.len() != errors.len() || ladder.windows(2).any(|w| w[1] >= w[0]) || ladder.iter().any(|e| *e <= 0.0) {
        return Err(EstimateError::InvalidLadder);
    }
    let (ladder, errors): (Vec<f64>, Vec<f64>) = ladder
        .iter()
        .zip(errors)
        .filter(|(_, e)| e.is_finite() && **e > 0.0)
        .map(|(a, b)| (*a, *b))
        .unzip();
    let n = ladder.len();
    if n < 3 {
        return Err(EstimateError::InsufficientData(n));
    }
    let x: Vec<f64> = ladder.iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let sxx: f64 = x.iter().map(|a| (a - xm) * (a - xm)).sum();
    let kappa = sxy / sxx;
    let intercept = ym - kappa * xm;
    let residual = (x
        .iter()
        .zip(&y)
        .map(|(a, b)| (b - kappa * a - intercept).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Ok(RateFit {
        ladder,
        errors,
        kappa,
        intercept,
        residual,
    })
}

/// Trial functions for the Hardy ratio; all vanish on the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HardyTrial {
    /// `dist(x, boundary)`.
    Distance,
    /// `(1 - |x - c|^2 / r^2)^2` inside the disk, 0 outside.
    Bubble { center: Point, radius: f64 },
    /// `dist(x)` times a seeded low-frequency trigonometric sum.
    Smooth { seed: u64 },
}

impl HardyTrial {
    pub fn id(&self) -> String {
        match self {
            HardyTrial::Distance => "dist".into(),
            HardyTrial::Bubble { center, radius } => {
                format!("bubble({:.4},{:.4};{:.4})", center[0], center[1], radius)
            }
            HardyTrial::Smooth { seed } => format!("smooth#{seed}"),
        }
    }

    pub fn nodal(&self, mesh: &TriMesh) -> Vec<f64> {
        let d = mesh.vertex_distances();
        let xs = mesh.vertices();
        match self {
            HardyTrial::Distance => d.to_vec(),
            HardyTrial::Bubble { center, radius } => xs
                .iter()
                .map(|x| {
                    let s = ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)) / (radius * radius);
                    if s < 1.0 {
                        (1.0 - s).powi(2)
                    } else {
                        0.0
                    }
                })
                .collect(),
            HardyTrial::Smooth { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let bb = mesh.domain().bbox();
                let ext = bb.width().max(bb.height());
                let waves: Vec<(f64, [f64; 2], f64)> = (0..4)
                    .map(|_| {
                        let k = [rng.gen_range(-2..=2) as f64, rng.gen_range(-2..=2) as f64];
                        (rng.gen_range(-1.0..1.0), k, rng.gen_range(0.0..std::f64::consts::TAU))
                    })
                    .collect();
                xs.iter()
                    .zip(d)
                    .map(|(x, dv)| {
                        let y = [(x[0] - bb.min[0]) / ext, (x[1] - bb.min[1]) / ext];
                        let s: f64 = waves
                            .iter()
                            .map(|(a, k, ph)| a * (std::f64::consts::TAU * (k[0] * y[0] + k[1] * y[1]) + ph).cos())
                            .sum();
                        dv * s
                    })
                    .collect()
            }
        }
    }
}

/// Bubbles with log-uniform radii whose disks lie inside the domain.
pub fn random_bubbles(domain: &PolygonDomain, count: usize, radius_range: (f64, f64), seed: u64) -> Vec<HardyTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = domain.bbox();
    let (r0, r1) = radius_range;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let radius = (r0.ln() + rng.gen::<f64>() * (r1.ln() - r0.ln())).exp();
        let center = [
            bb.min[0] + rng.gen::<f64>() * bb.width(),
            bb.min[1] + rng.gen::<f64>() * bb.height(),
        ];
        if domain.contains(center) && domain.distance_to_boundary(center) >= radius {
            out.push(HardyTrial::Bubble { center, radius });
        }
    }
    out
}

/// `int |u|^2 dist^{-2} / int |grad u|^2` for a nodal P1 field; the numerator uses the
/// offset-midpoint rule. `None` when the gradient vanishes.
pub fn hardy_ratio(mesh: &TriMesh, values: &[f64]) -> Option<f64> {
    let grads = fem::gradient(values, 1, mesh);
    let (num, den) = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| {
            let corners = mesh.corners(t);
            let tri = mesh.triangles()[t];
            let q: f64 = mesh
                .weight_points(t)
                .iter()
                .map(|&p| {
                    let b = barycentric(corners, p);
                    let u: f64 = (0..3).map(|k| b[k] * values[tri[k]]).sum();
                    let d = mesh.domain().distance_to_boundary(p);
                    u * u / (d * d)
                })
                .sum::<f64>()
                / 3.0;
            let a = mesh.area(t);
            (q * a, (grads[2 * t].powi(2) + grads[2 * t + 1].powi(2)) * a)
        })
        .collect::<Vec<_>>()
        .iter()
        .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

pub fn hardy_check(mesh: &TriMesh, trials: &[HardyTrial]) -> Result<ConstantEstimate, EstimateError> {
    let mut ratios = Vec::with_capacity(trials.len());
    for trial in trials {
        let values = trial.nodal(mesh);
        let leak = (0..mesh.n_vertices())
            .filter(|&v| mesh.is_boundary(v))
            .any(|v| values[v].abs() > 1e-12);
        if leak {
            return Err(EstimateError::TrialNotVanishing(trial.id()));
        }
        if let Some(r) = hardy_ratio(mesh, &values) {
            ratios.push((trial.id(), r));
        }
    }
    ConstantEstimate::from_ratios("hardy", ratios)
}

/// Growth over the smallest-`|sigma|` constant that flags a blow-up.
pub const BLOW_UP_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRange {
    pub sigmas: Vec<f64>,
    pub estimates: Vec<ConstantEstimate>,
    /// First `sigma` (in order of `|sigma|`) whose constant exceeds `growth` times the
    /// constant at the smallest `|sigma|`.
    pub blow_up: Option<f64>,
}

/// Dirichlet constants with `w = dist^sigma` at `eps = 1` for a rough coefficient.
pub fn rough_coefficient_sigma_range(
    mesh: &TriMesh,
    coef: &CoefficientField,
    sigmas: &[f64],
    family: &RhsFamily,
    growth: f64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<SigmaRange, EstimateError> {
    let mut sigmas = sigmas.to_vec();
    sigmas.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let weights: Vec<Weight> = sigmas
        .iter()
        .map(|&s| make_distance_weight(mesh.domain().clone(), s))
        .collect::<Result<_, _>>()?;
    let estimates: Vec<ConstantEstimate> = dirichlet_ratios(mesh, coef, 1.0, &weights, family, opts, config)?
        .into_iter()
        .map(|mut e| {
            e.inequality = "sigma_range".into();
            e
        })
        .collect();
    let blow_up = estimates.first().and_then(|base| {
        sigmas
            .iter()
            .zip(&estimates)
            .find(|(_, e)| e.constant > growth * base.constant)
            .map(|(s, _)| *s)
    });
    Ok(SigmaRange {
        sigmas,
        estimates,
        blow_up,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRecord {
    pub ball: Ball,
    pub trial: usize,
    /// `(avg_{2B} F_B^{p0})^{1/p0}` over the largest `(avg_{kB} |f|^2)^{1/2}`, `k = 2..5`.
    pub n1_ratio: f64,
    /// Weighted `(avg_{2B} R_B^{p1} w / avg_{2B} w)^{1/p1}` over
    /// `(avg_{4B} |grad u|^2)^{1/2}` plus the same `f` term.
    pub r_ratio: f64,
    /// Triangles with `|grad u| > |grad v| + |grad(u - v)|` beyond a 4-ulp rounding slack.
    pub triangle_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionProbe {
    pub p0: f64,
    pub p1: f64,
    pub records: Vec<BallRecord>,
}

impl DecompositionProbe {
    pub fn max_n1(&self) -> f64 {
        self.records.iter().map(|r| r.n1_ratio).fold(0.0, f64::max)
    }

    pub fn max_r(&self) -> f64 {
        self.records.iter().map(|r| r.r_ratio).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| r.n1_ratio.is_finite() && r.r_ratio.is_finite())
    }

    pub fn violations(&self) -> usize {
        self.records.iter().map(|r| r.triangle_violations).sum()
    }
}

/// Lipschitz cutoff equal to 1 on `4B` and 0 outside `5B`.
pub fn ball_cutoff(ball: &Ball, x: Point) -> f64 {
    let d = ((x[0] - ball.center[0]).powi(2) + (x[1] - ball.center[1]).powi(2)).sqrt();
    ((5.0 * ball.radius - d) / ball.radius).clamp(0.0, 1.0)
}

fn set_average(mesh: &TriMesh, set: &[usize], f: impl Fn(usize) -> f64) -> Option<f64> {
    let area: f64 = set.iter().map(|&t| mesh.area(t)).sum();
    (area > 0.0).then(|| set.iter().map(|&t| f(t) * mesh.area(t)).sum::<f64>() / area)
}

/// Splits `grad u = grad v + grad(u - v)` on one ball, where `v` solves the problem with the
/// cut-off flux `f phi_B`. `None` when `2B` holds no triangle centroid.
#[allow(clippy::too_many_arguments)]
pub fn decompose_ball(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    tw: &[f64],
    ball: &Ball,
    flux: &[f64],
    grad_u: &[f64],
    p0: f64,
    p1: f64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<Option<BallRecord>, EstimateError> {
    let m = coef.m();
    let comps = m * DIM;
    let within = |factor: f64| -> Vec<usize> {
        let bb = ball.scaled(factor);
        (0..mesh.n_triangles()).filter(|&t| bb.contains(mesh.centroid(t))).collect()
    };
    let two = within(2.0);
    if two.is_empty() {
        return Ok(None);
    }
    let mut local = flux.to_vec();
    for t in 0..mesh.n_triangles() {
        let c = ball_cutoff(ball, mesh.centroid(t));
        local[t * comps..(t + 1) * comps].iter_mut().for_each(|v| *v *= c);
    }
    let data = ProblemData {
        flux: Some(local),
        body: None,
        dirichlet: Dirichlet::homogeneous(mesh, m),
    };
    let gv = solve_problem(mesh, coef, eps, &data, opts, config)?.gradients;
    let size_at = |g: &[f64], t: usize| squared_sum(&g[t * comps..(t + 1) * comps]).sqrt();
    let fb = |t: usize| size_at(&gv, t);
    let rb = |t: usize| {
        let d: Vec<f64> = (0..comps).map(|c| grad_u[t * comps + c] - gv[t * comps + c]).collect();
        squared_sum(&d).sqrt()
    };
    let f_sup = [2.0, 3.0, 4.0, 5.0]
        .iter()
        .filter_map(|&s| set_average(mesh, &within(s), |t| size_at(flux, t).powi(2)))
        .fold(0.0, f64::max)
        .sqrt();
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let fb_avg = set_average(mesh, &two, |t| fb(t).powf(p0)).unwrap_or(0.0).powf(1.0 / p0);
    let w_avg = set_average(mesh, &two, |t| tw[t]).unwrap_or(0.0);
    let rb_avg = (set_average(mesh, &two, |t| rb(t).powf(p1) * tw[t]).unwrap_or(0.0) / w_avg).powf(1.0 / p1);
    let gu_avg = set_average(mesh, &within(4.0), |t| size_at(grad_u, t).powi(2))
        .unwrap_or(0.0)
        .sqrt();
    let triangle_violations = (0..mesh.n_triangles())
        .filter(|&t| size_at(grad_u, t) > (fb(t) + rb(t)) * (1.0 + 4.0 * f64::EPSILON))
        .count();
    Ok(Some(BallRecord {
        ball: *ball,
        trial: 0,
        n1_ratio: ratio(fb_avg, f_sup),
        r_ratio: ratio(rb_avg, gu_avg + f_sup),
        triangle_violations,
    }))
}

/// [`decompose_ball`] for every (trial, ball) pair, ordered by trial then ball.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_probe(
    mesh: &TriMesh,
    coef: &CoefficientField,
    eps: f64,
    w: &Weight,
    balls: &[Ball],
    family: &RhsFamily,
    p0: f64,
    p1: f64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> Result<DecompositionProbe, EstimateError> {
    let tw = triangle_weights(mesh, w)?;
    let m = coef.m();
    let globals: Vec<(Vec<f64>, Vec<f64>)> = (0..family.count)
        .into_par_iter()
        .map(|k| -> Result<_, EstimateError> {
            let f = trial_flux(mesh, m, family.generator, family.seed.wrapping_add(k as u64));
            let data = ProblemData::flux_only(mesh, m, f);
            let u = solve_problem(mesh, coef, eps, &data, opts, config)?;
            Ok((data.flux.unwrap_or_default(), u.gradients))
        })
        .collect::<Result<_, _>>()?;
    let records: Vec<Option<BallRecord>> = (0..family.count * balls.len())
        .into_par_iter()
        .map(|idx| {
            let (k, b) = (idx / balls.len(), idx % balls.len());
            let (f, gu) = &globals[k];
            let rec = decompose_ball(mesh, coef, eps, &tw, &balls[b], f, gu, p0, p1, opts, config)?;
            Ok(rec.map(|r| BallRecord { trial: k, ..r }))
        })
        .collect::<Result<_, EstimateError>>()?;
    Ok(DecompositionProbe {
        p0,
        p1,
        records: records.into_iter().flatten().collect(),
    })
}

/// One `(eps, sigma)` entry of a sweep; failures are recorded and the sweep continues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub sigma: f64,
    pub estimate: Option<ConstantEstimate>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub domain: String,
    pub coef: String,
    pub eps: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Ordered by eps index, then sigma index.
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, eps_index: usize, sigma_index: usize) -> &SweepCell {
        &self.cells[eps_index * self.sigmas.len() + sigma_index]
    }

    /// Measured constants of one sigma across the eps ladder.
    pub fn sigma_row(&self, sigma_index: usize) -> Vec<Option<f64>> {
        (0..self.eps.len())
            .map(|e| self.cell(e, sigma_index).estimate.as_ref().map(|c| c.constant))
            .collect()
    }

    /// `max / min` of a sigma row; `None` if any entry failed.
    pub fn spread(&self, sigma_index: usize) -> Option<f64> {
        let row: Option<Vec<f64>> = self.sigma_row(sigma_index).into_iter().collect();
        let row = row?;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(max / min)
    }
}

/// Dirichlet constants on an `eps x sigma` grid with `h = eps / per_period` and the same
/// trial seeds in every cell.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_sigma_sweep(
    domain: &PolygonDomain,
    coef: &CoefficientField,
    eps_ladder: &[f64],
    sigmas: &[f64],
    family: &RhsFamily,
    per_period: f64,
    opts: AssemblyOptions,
    config: SolverConfig,
) -> SweepReport {
    let mut cells = Vec::with_capacity(eps_ladder.len() * sigmas.len());
    for &eps in eps_ladder {
        let weights: Vec<Result<Weight, WeightError>> = sigmas
            .iter()
            .map(|&s| make_distance_weight(domain.clone(), s))
            .collect();
        let valid: Vec<Weight> = weights.iter().filter_map(|w| w.as_ref().ok().cloned()).collect();
        let run = triangulate(domain, eps / per_period)
            .map_err(EstimateError::from)
            .and_then(|mesh| dirichlet_ratios(&mesh, coef, eps, &valid, family, opts, config));
        let mut next = 0;
        for (&sigma, w) in sigmas.iter().zip(&weights) {
            let (estimate, error) = match (w, &run) {
                (Err(e), _) => (None, Some(e.to_string())),
                (Ok(_), Err(e)) => (None, Some(e.to_string())),
                (Ok(_), Ok(list)) => {
                    next += 1;
                    (Some(list[next - 1].clone()), None)
                }
            };
            cells.push(SweepCell {
                eps,
                sigma,
                estimate,
                error,
            });
        }
    }
    SweepReport {
        domain: domain.name().to_string(),
        coef: coef.name().to_string(),
        eps: eps_ladder.to_vec(),
        sigmas: sigmas.to_vec(),
        cells,
    }
}
