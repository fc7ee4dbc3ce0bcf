//! Weights on the plane: constants, distance powers `dist(x, dOmega)^sigma`, and tabulated grids,
//! with ball-sampled A_p and reverse Hölder estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Ball, Point, PolygonDomain, TriMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("inadmissible exponent sigma = {0} (need -1 < sigma < 1)")]
    InadmissibleExponent(f64),
    #[error("singular evaluation at {0:?}")]
    SingularEvaluation(Point),
    #[error("invalid weight value {value} at {at:?}")]
    InvalidWeight { value: f64, at: Point },
    #[error("point {0:?} outside the tabulated grid")]
    OutsideTable(Point),
    #[error("invalid sampling: {0}")]
    InvalidSampling(String),
    #[error("every sampled ball was skipped")]
    AllBallsSkipped,
}

/// Piecewise-constant weight on a uniform `nx x ny` grid over `bbox`, row-major in `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub bbox: BBox,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    Constant(f64),
    DistancePower { domain: PolygonDomain, sigma: f64 },
    Tabulated(Table),
}

/// Muckenhoupt class guaranteed for a distance weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    A1,
    A2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    kind: WeightKind,
    scale: f64,
}

impl Weight {
    pub fn constant(c: f64) -> Self {
        Self {
            kind: WeightKind::Constant(c),
            scale: 1.0,
        }
    }

    /// `dist(x, dOmega)^sigma`; `sigma = 0` collapses to the constant 1.
    pub fn distance(domain: PolygonDomain, sigma: f64) -> Result<Self, WeightError> {
        make_distance_weight(domain, sigma)
    }

    /// Distance power without the admissibility range check, for quadrature experiments
    /// with exponents such as `sigma = 1`.
    pub fn distance_unchecked(domain: PolygonDomain, sigma: f64) -> Self {
        Self {
            kind: WeightKind::DistancePower { domain, sigma },
            scale: 1.0,
        }
    }

    pub fn tabulated(table: Table) -> Result<Self, WeightError> {
        if table.values.len() != table.nx * table.ny || table.nx == 0 || table.ny == 0 {
            return Err(WeightError::InvalidSampling("table shape".into()));
        }
        if let Some(&v) = table.values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(WeightError::InvalidWeight {
                value: v,
                at: table.bbox.min,
            });
        }
        Ok(Self {
            kind: WeightKind::Tabulated(table),
            scale: 1.0,
        })
    }

    /// `c * w`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kind: self.kind.clone(),
            scale: self.scale * c,
        }
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn sigma(&self) -> Option<f64> {
        match &self.kind {
            WeightKind::DistancePower { sigma, .. } => Some(*sigma),
            WeightKind::Constant(_) => Some(0.0),
            WeightKind::Tabulated(_) => None,
        }
    }

    pub fn regime(&self) -> Option<Regime> {
        match &self.kind {
            WeightKind::Constant(_) => Some(Regime::A1),
            WeightKind::DistancePower { sigma, .. } if *sigma <= 0.0 => Some(Regime::A1),
            WeightKind::DistancePower { .. } => Some(Regime::A2),
            WeightKind::Tabulated(_) => None,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, WeightKind::Constant(_))
    }

    pub fn label(&self) -> String {
        match &self.kind {
            WeightKind::Constant(c) if *c * self.scale == 1.0 => "one".into(),
            WeightKind::Constant(c) => format!("const:{}", c * self.scale),
            WeightKind::DistancePower { sigma, .. } => format!("sigma:{sigma}"),
            WeightKind::Tabulated(t) => format!("table:{}x{}", t.nx, t.ny),
        }
    }

    /// The weight without its scale factor.
    fn eval_base(&self, x: Point) -> Result<f64, WeightError> {
        let v = match &self.kind {
            WeightKind::Constant(c) => *c,
            WeightKind::DistancePower { domain, sigma } => {
                let d = domain.distance_to_boundary(x);
                if d == 0.0 && *sigma < 0.0 {
                    return Err(WeightError::SingularEvaluation(x));
                }
                d.powf(*sigma)
            }
            WeightKind::Tabulated(t) => {
                if !t.bbox.contains(x) {
                    return Err(WeightError::OutsideTable(x));
                }
                let i = (((x[0] - t.bbox.min[0]) / t.bbox.width() * t.nx as f64) as usize).min(t.nx - 1);
                let j = (((x[1] - t.bbox.min[1]) / t.bbox.height() * t.ny as f64) as usize).min(t.ny - 1);
                t.values[j * t.nx + i]
            }
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(WeightError::InvalidWeight { value: v, at: x });
        }
        Ok(v)
    }

    pub fn eval(&self, x: Point) -> Result<f64, WeightError> {
        Ok(self.scale * self.eval_base(x)?)
    }

    /// Average over the axis-aligned square cell of side `side` centred at `x`.
    pub fn cell_average(&self, x: Point, side: f64) -> Result<f64, WeightError> {
        Ok(self.scale * self.cell_average_base(x, side)?)
    }

    /// Unscaled average over the square cell of side `side` centred at `x`. Distance powers
    /// are integrated exactly across the cell in the signed distance variable, which is exact
    /// for cells aligned with the nearest edge and keeps the value finite on the boundary.
    fn cell_average_base(&self, x: Point, side: f64) -> Result<f64, WeightError> {
        match &self.kind {
            WeightKind::DistancePower { domain, sigma } if *sigma > -1.0 => {
                let d = domain.distance_to_boundary(x);
                let t = if domain.contains(x) { d } else { -d };
                let e = sigma + 1.0;
                let prim = |u: f64| u.signum() * u.abs().powf(e) / e;
                let v = (prim(t + 0.5 * side) - prim(t - 0.5 * side)) / side;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(WeightError::InvalidWeight { value: v, at: x });
                }
                Ok(v)
            }
            _ => self.eval_base(x),
        }
    }
}

pub fn make_distance_weight(domain: PolygonDomain, sigma: f64) -> Result<Weight, WeightError> {
    if !(sigma > -1.0 && sigma < 1.0) {
        return Err(WeightError::InadmissibleExponent(sigma));
    }
    if sigma == 0.0 {
        return Ok(Weight::constant(1.0));
    }
    Ok(Weight {
        kind: WeightKind::DistancePower { domain, sigma },
        scale: 1.0,
    })
}

pub fn eval_weight(w: &Weight, x: Point) -> Result<f64, WeightError> {
    w.eval(x)
}

/// Per-triangle weight: mean of the weight at the three offset edge midpoints.
pub fn triangle_weights(mesh: &TriMesh, w: &Weight) -> Result<Vec<f64>, WeightError> {
    if let WeightKind::Constant(c) = w.kind {
        return Ok(vec![c * w.scale; mesh.n_triangles()]);
    }
    (0..mesh.n_triangles())
        .into_par_iter()
        .with_min_len(512)
        .map(|t| {
            let mut s = 0.0;
            for q in mesh.weight_points(t) {
                s += w.eval(q)?;
            }
            Ok(s / 3.0)
        })
        .collect()
}

/// Midpoint nodes of an `n x n` tensor grid on the square around `ball` that fall inside it.
pub fn ball_nodes(ball: &Ball, n: usize) -> Vec<Point> {
    let r = ball.radius;
    let step = 2.0 * r / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let dx = -r + (i as f64 + 0.5) * step;
            let dy = -r + (j as f64 + 0.5) * step;
            if dx * dx + dy * dy < r * r {
                out.push([ball.center[0] + dx, ball.center[1] + dy]);
            }
        }
    }
    out
}

/// Unscaled cell-averaged weight values at the quadrature nodes of `ball`; `None` if any
/// node is singular.
fn ball_values(w: &Weight, ball: &Ball, n: usize) -> Result<Option<Vec<f64>>, WeightError> {
    let nodes = ball_nodes(ball, n);
    if nodes.is_empty() {
        return Ok(None);
    }
    let side = 2.0 * ball.radius / n as f64;
    let mut vals = Vec::with_capacity(nodes.len());
    for x in nodes {
        match w.cell_average_base(x, side) {
            Ok(v) => vals.push(v),
            Err(WeightError::SingularEvaluation(_)) | Err(WeightError::OutsideTable(_)) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(vals))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Single-ball A_p quantity from node values. Rounding can push it a few ulps below 1, the
/// floor that Hölder's inequality forces, so it is clamped there.
pub fn ap_quantity(vals: &[f64], p: f64) -> f64 {
    let q = if p == 1.0 {
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        mean(vals) / min
    } else {
        let e = -1.0 / (p - 1.0);
        let dual = vals.iter().map(|v| v.powf(e)).sum::<f64>() / vals.len() as f64;
        mean(vals) * dual.powf(p - 1.0)
    };
    q.max(1.0)
}

/// Average of the weight over `ball` by the tensor midpoint rule.
pub fn ball_average(w: &Weight, ball: &Ball, n: usize) -> Result<Option<f64>, WeightError> {
    Ok(ball_values(w, ball, n)?.map(|v| w.scale * mean(&v)))
}

/// Single-ball A_p quantity, `None` for skipped balls.
pub fn ball_ap(w: &Weight, ball: &Ball, p: f64, n: usize) -> Result<Option<f64>, WeightError> {
    Ok(ball_values(w, ball, n)?.map(|v| ap_quantity(&v, p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub n_balls: usize,
    pub radius_range: (f64, f64),
    /// Tensor grid resolution per ball side.
    pub quad_n: usize,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            n_balls: 2000,
            radius_range: (0.01, 0.25),
            quad_n: 16,
            seed: 42,
        }
    }
}

impl Sampling {
    fn validate(&self) -> Result<(), WeightError> {
        let (lo, hi) = self.radius_range;
        if self.n_balls == 0 {
            return Err(WeightError::InvalidSampling("n_balls must be >= 1".into()));
        }
        if self.quad_n < 4 {
            return Err(WeightError::InvalidSampling("need >= 4 nodes per ball diameter".into()));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(WeightError::InvalidSampling(format!("radius range {lo}..{hi}")));
        }
        Ok(())
    }
}

/// Centers uniform in `region`, radii log-uniform in the range.
pub fn sample_ball_family(region: &BBox, sampling: &Sampling) -> Vec<Ball> {
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let (lo, hi) = sampling.radius_range;
    (0..sampling.n_balls)
        .map(|_| {
            let c = [
                rng.gen_range(region.min[0]..=region.max[0]),
                rng.gen_range(region.min[1]..=region.max[1]),
            ];
            let r = if hi > lo {
                (rng.gen_range(lo.ln()..hi.ln())).exp()
            } else {
                lo
            };
            Ball::new(c, r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEstimate {
    pub p: f64,
    pub constant: f64,
    pub n_balls: usize,
    pub radius_range: (f64, f64),
    pub worst_ball: Ball,
}

/// Sup of the single-ball A_p quantity over a fixed family. Ties keep the lowest index.
pub fn estimate_ap_on(w: &Weight, p: f64, balls: &[Ball], quad_n: usize) -> Result<ApEstimate, WeightError> {
    if !(p >= 1.0) {
        return Err(WeightError::InvalidSampling(format!("p = {p}")));
    }
    let per: Vec<Option<f64>> = balls
        .par_iter()
        .map(|b| ball_ap(w, b, p, quad_n))
        .collect::<Result<_, _>>()?;
    let mut best: Option<(f64, usize)> = None;
    let mut used = 0;
    for (i, q) in per.iter().enumerate() {
        if let Some(q) = q {
            used += 1;
            if best.is_none_or(|(b, _)| *q > b) {
                best = Some((*q, i));
            }
        }
    }
    let (constant, idx) = best.ok_or(WeightError::AllBallsSkipped)?;
    let (lo, hi) = balls
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), b| (lo.min(b.radius), hi.max(b.radius)));
    Ok(ApEstimate {
        p,
        constant,
        n_balls: used,
        radius_range: (lo, hi),
        worst_ball: balls[idx],
    })
}

pub fn estimate_ap_constant(
    w: &Weight,
    p: f64,
    region: &BBox,
    sampling: &Sampling,
) -> Result<ApEstimate, WeightError> {
    sampling.validate()?;
    let balls = sample_ball_family(region, sampling);
    estimate_ap_on(w, p, &balls, sampling.quad_n)
}

/// Default cap on `sup_B (avg w^{1+s})^{1/(1+s)} / avg w`.
pub const REVERSE_HOLDER_CAP: f64 = 2.0;

pub const REVERSE_HOLDER_LADDER: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReverseHolderProbe {
    /// Largest passing exponent, 0 when none passes.
    pub exponent: f64,
    /// Sup ratio at the passing exponent (1 when none passes).
    pub constant: f64,
    /// `(s, sup ratio)` for every rung.
    pub ladder: Vec<(f64, f64)>,
}

pub fn probe_reverse_holder(
    w: &Weight,
    region: &BBox,
    sampling: &Sampling,
    cap: f64,
) -> Result<ReverseHolderProbe, WeightError> {
    sampling.validate()?;
    let balls = sample_ball_family(region, sampling);
    let values: Vec<Option<Vec<f64>>> = balls
        .par_iter()
        .map(|b| ball_values(w, b, sampling.quad_n))
        .collect::<Result<_, _>>()?;
    if values.iter().all(Option::is_none) {
        return Err(WeightError::AllBallsSkipped);
    }
    let mut ladder = Vec::new();
    let mut exponent = 0.0;
    let mut constant = 1.0;
    for &s in REVERSE_HOLDER_LADDER.iter() {
        let sup = values
            .iter()
            .flatten()
            .map(|v| {
                let m = mean(v);
                let hi = (v.iter().map(|x| (x / m).powf(1.0 + s)).sum::<f64>() / v.len() as f64)
                    .powf(1.0 / (1.0 + s));
                hi
            })
            .fold(0.0f64, f64::max);
        ladder.push((s, sup));
        if sup <= cap {
            exponent = s;
            constant = sup;
        }
    }
    Ok(ReverseHolderProbe {
        exponent,
        constant,
        ladder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PolygonDomain;
    use proptest::prelude::*;

    fn square() -> PolygonDomain {
        PolygonDomain::unit_square()
    }

    fn unit_box() -> BBox {
        square().bbox()
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(Weight::constant(1.0).eval([0.3, 0.9]).unwrap(), 1.0);
        let w0 = Weight::distance(square(), 0.0).unwrap();
        assert!(w0.is_constant());
        assert_eq!(w0.eval([0.1, 0.2]).unwrap(), 1.0);
        let w = Weight::distance(square(), -0.5).unwrap();
        assert!((w.eval([0.5, 0.25]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(w.eval([0.0, 0.5]), Err(WeightError::SingularEvaluation(_))));
        assert_eq!(Weight::distance(square(), 0.5).unwrap().eval([0.0, 0.5]).unwrap_err(),
            WeightError::InvalidWeight { value: 0.0, at: [0.0, 0.5] });
    }

    #[test]
    fn regimes_and_admissibility() {
        assert_eq!(Weight::distance(square(), -0.5).unwrap().regime(), Some(Regime::A1));
        assert_eq!(Weight::distance(square(), 0.5).unwrap().regime(), Some(Regime::A2));
        for s in [-1.0, 1.0, 1.5, f64::NAN] {
            assert!(matches!(Weight::distance(square(), s), Err(WeightError::InadmissibleExponent(_))));
        }
    }

    #[test]
    fn constant_weight_ap_is_one() {
        let s = Sampling {
            n_balls: 50,
            ..Default::default()
        };
        for p in [1.0, 2.0, 3.5] {
            assert_eq!(estimate_ap_constant(&Weight::constant(1.0), p, &unit_box(), &s).unwrap().constant, 1.0);
        }
    }

    #[test]
    fn a1_estimate_is_stable_under_doubling() {
        let w = Weight::distance(square(), -0.5).unwrap();
        let base = Sampling::default();
        let a = estimate_ap_constant(&w, 1.0, &unit_box(), &base).unwrap().constant;
        let more = Sampling {
            n_balls: 4000,
            quad_n: 32,
            ..base
        };
        let b = estimate_ap_constant(&w, 1.0, &unit_box(), &more).unwrap().constant;
        assert!(a.is_finite() && b.is_finite());
        assert!((a / b - 1.0).abs() <= 0.1, "{a} vs {b}");
    }

    #[test]
    fn ap_monotone_in_p_and_at_least_one() {
        let w = Weight::distance(PolygonDomain::l_shape(), -0.7).unwrap();
        let s = Sampling {
            n_balls: 300,
            ..Default::default()
        };
        let balls = sample_ball_family(&PolygonDomain::l_shape().bbox(), &s);
        let mut prev = f64::INFINITY;
        for p in [1.0, 1.5, 2.0, 3.0, 6.0] {
            for b in &balls {
                if let Some(q) = ball_ap(&w, b, p, 16).unwrap() {
                    assert!(q >= 1.0);
                }
            }
            let c = estimate_ap_on(&w, p, &balls, 16).unwrap().constant;
            assert!(c <= prev * (1.0 + 1e-12));
            prev = c;
        }
    }

    #[test]
    fn doubling_with_measured_a1_constant() {
        let w = Weight::distance(square(), -0.6).unwrap();
        let s = Sampling {
            n_balls: 200,
            ..Default::default()
        };
        let n = s.quad_n;
        let balls = sample_ball_family(&unit_box(), &s);
        let mut c_a1 = 1.0f64;
        let mut ratios = Vec::new();
        for b in &balls {
            let big = b.scaled(2.0);
            let (Some(vb), Some(v2)) = (ball_values(&w, b, n).unwrap(), ball_values(&w, &big, n).unwrap()) else {
                continue;
            };
            let min_all = vb.iter().chain(&v2).cloned().fold(f64::INFINITY, f64::min);
            c_a1 = c_a1.max(ap_quantity(&vb, 1.0)).max(mean(&v2) / min_all);
            ratios.push(4.0 * mean(&v2) / mean(&vb));
        }
        assert!(!ratios.is_empty());
        for r in ratios {
            assert!(r <= c_a1 * 4.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn reverse_holder_examples() {
        let s = Sampling {
            n_balls: 500,
            ..Default::default()
        };
        let one = probe_reverse_holder(&Weight::constant(1.0), &unit_box(), &s, REVERSE_HOLDER_CAP).unwrap();
        assert_eq!(one.exponent, 0.9);
        assert!(one.ladder.iter().all(|(_, c)| (c - 1.0).abs() < 1e-12));
        let half = probe_reverse_holder(&Weight::distance(square(), -0.5).unwrap(), &unit_box(), &s, REVERSE_HOLDER_CAP)
            .unwrap();
        let deep = probe_reverse_holder(&Weight::distance(square(), -0.9).unwrap(), &unit_box(), &s, REVERSE_HOLDER_CAP)
            .unwrap();
        assert!(half.exponent >= 0.1 && half.constant.is_finite());
        assert!(deep.exponent < half.exponent, "{deep:?} {half:?}");
    }

    #[test]
    fn sampling_validation() {
        let w = Weight::constant(1.0);
        let bad = Sampling {
            quad_n: 3,
            ..Default::default()
        };
        assert!(estimate_ap_constant(&w, 2.0, &unit_box(), &bad).is_err());
        let bad = Sampling {
            n_balls: 0,
            ..Default::default()
        };
        assert!(estimate_ap_constant(&w, 2.0, &unit_box(), &bad).is_err());
    }

    #[test]
    fn triangle_weights_are_positive() {
        let mesh = crate::geometry::triangulate(&PolygonDomain::l_shape(), 1.0 / 32.0).unwrap();
        let w = Weight::distance(PolygonDomain::l_shape(), -0.9).unwrap();
        let tw = triangle_weights(&mesh, &w).unwrap();
        assert!(tw.iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scaling_invariance(c in 1e-3f64..1e3, sigma in -0.9f64..0.9, p in 1.0f64..4.0) {
            let w = Weight::distance(square(), sigma).unwrap();
            let s = Sampling { n_balls: 40, ..Default::default() };
            let a = estimate_ap_constant(&w, p, &unit_box(), &s).unwrap();
            let b = estimate_ap_constant(&w.scaled(c), p, &unit_box(), &s).unwrap();
            prop_assert_eq!(a.constant, b.constant);
        }

        #[test]
        fn distance_weight_positive_off_boundary(x in 0.001f64..0.999, y in -0.5f64..1.5, sigma in -0.99f64..0.99) {
            let w = Weight::distance(square(), sigma).unwrap();
            prop_assert!(w.eval([x, y]).unwrap() > 0.0);
        }
    }
}
