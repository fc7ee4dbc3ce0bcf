//! Dyadic cubes on a square root, the Calderón–Zygmund stopping-time decomposition, and
//! localized maximal operators on uniform cell grids.
//!
//! All set operations are done on integer cell indices so the decomposition properties hold
//! exactly. Sub-balls are lattice disks centred at cell centres; a disk of radius `r` holds
//! the cells whose centres lie within `r` of its centre.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Ball, Point};
use crate::weights::{Weight, WeightError};

pub const MAX_LEVEL: u32 = 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DyadicError {
    #[error("measure precondition violated: |E| = {cells} cells, need < {limit}")]
    MeasurePrecondition { cells: usize, limit: usize },
    #[error("level {0} exceeds the maximum {MAX_LEVEL}")]
    LevelTooDeep(u32),
    #[error("empty ball family: eps = {eps} >= radius {radius}")]
    EmptyBallFamily { eps: f64, radius: f64 },
    #[error("ball does not meet the grid")]
    BallMissesGrid,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Weight(#[from] WeightError),
}

/// Axis-aligned root square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootCube {
    pub corner: Point,
    pub side: f64,
}

impl RootCube {
    pub fn unit() -> Self {
        Self {
            corner: [0.0, 0.0],
            side: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: u32,
    pub ix: u32,
    pub iy: u32,
}

impl DyadicCube {
    pub const ROOT: DyadicCube = DyadicCube { level: 0, ix: 0, iy: 0 };

    pub fn new(level: u32, ix: u32, iy: u32) -> Self {
        Self { level, ix, iy }
    }

    pub fn parent(&self) -> Option<Self> {
        (self.level > 0).then(|| Self::new(self.level - 1, self.ix / 2, self.iy / 2))
    }

    pub fn children(&self) -> [Self; 4] {
        let (l, x, y) = (self.level + 1, 2 * self.ix, 2 * self.iy);
        [
            Self::new(l, x, y),
            Self::new(l, x + 1, y),
            Self::new(l, x, y + 1),
            Self::new(l, x + 1, y + 1),
        ]
    }

    pub fn side(&self, root: &RootCube) -> f64 {
        root.side / (1u64 << self.level) as f64
    }

    pub fn corner(&self, root: &RootCube) -> Point {
        let s = self.side(root);
        [root.corner[0] + self.ix as f64 * s, root.corner[1] + self.iy as f64 * s]
    }

    /// Half-open cell index range `[lo, hi)` per axis at `level`.
    pub fn cell_range(&self, level: u32) -> ([usize; 2], [usize; 2]) {
        debug_assert!(level >= self.level);
        let k = 1usize << (level - self.level);
        let lo = [self.ix as usize * k, self.iy as usize * k];
        (lo, [lo[0] + k, lo[1] + k])
    }

    pub fn contains(&self, other: &DyadicCube) -> bool {
        other.level >= self.level
            && (other.ix >> (other.level - self.level)) == self.ix
            && (other.iy >> (other.level - self.level)) == self.iy
    }
}

/// One value per cell of the `2^level x 2^level` grid over `root`, row-major in `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub root: RootCube,
    pub level: u32,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(root: RootCube, level: u32, values: Vec<f64>) -> Result<Self, DyadicError> {
        if level > MAX_LEVEL {
            return Err(DyadicError::LevelTooDeep(level));
        }
        let n = 1usize << level;
        if values.len() != n * n {
            return Err(DyadicError::Shape(format!("{} values for {n}x{n} cells", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DyadicError::Shape("non-finite value".into()));
        }
        Ok(Self { root, level, values })
    }

    pub fn constant(root: RootCube, level: u32, c: f64) -> Self {
        let n = 1usize << level;
        Self {
            root,
            level,
            values: vec![c; n * n],
        }
    }

    pub fn from_fn(root: RootCube, level: u32, f: impl Fn(Point) -> f64) -> Self {
        let mut g = Self::constant(root, level, 0.0);
        let n = g.n();
        for j in 0..n {
            for i in 0..n {
                g.values[j * n + i] = f(g.cell_center(i, j));
            }
        }
        g
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        1 << self.level
    }

    pub fn h(&self) -> f64 {
        self.root.side / self.n() as f64
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n() + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        let h = self.h();
        [
            self.root.corner[0] + (i as f64 + 0.5) * h,
            self.root.corner[1] + (j as f64 + 0.5) * h,
        ]
    }

    /// Seeded cell values uniform in `[0, 1)`.
    pub fn random(root: RootCube, level: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1usize << level;
        Self {
            root,
            level,
            values: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        }
    }

    /// Each cell split into `2^by x 2^by` children carrying the same value.
    pub fn refine(&self, by: u32) -> Result<Self, DyadicError> {
        let level = self.level + by;
        if level > MAX_LEVEL {
            return Err(DyadicError::LevelTooDeep(level));
        }
        let n = 1usize << level;
        let k = 1usize << by;
        let mut values = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                values[j * n + i] = self.get(i / k, j / k);
            }
        }
        Ok(Self {
            root: self.root,
            level,
            values,
        })
    }
}

/// Set of finest-level cells, row-major in `y`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSet {
    pub level: u32,
    pub cells: Vec<bool>,
}

impl CellSet {
    pub fn empty(level: u32) -> Self {
        let n = 1usize << level;
        Self {
            level,
            cells: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        1 << self.level
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.n() + i]
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        let n = self.n();
        self.cells[j * n + i] = true;
    }
}

/// 2D prefix counts for O(1) rectangle membership counts.
struct PrefixCount {
    n: usize,
    sums: Vec<usize>,
}

impl PrefixCount {
    fn new(set: &CellSet) -> Self {
        let n = set.n();
        let mut sums = vec![0; (n + 1) * (n + 1)];
        for j in 0..n {
            for i in 0..n {
                sums[(j + 1) * (n + 1) + i + 1] = set.contains(i, j) as usize + sums[j * (n + 1) + i + 1]
                    + sums[(j + 1) * (n + 1) + i]
                    - sums[j * (n + 1) + i];
            }
        }
        Self { n, sums }
    }

    fn rect(&self, lo: [usize; 2], hi: [usize; 2]) -> usize {
        let w = self.n + 1;
        self.sums[hi[1] * w + hi[0]] + self.sums[lo[1] * w + lo[0]]
            - self.sums[lo[1] * w + hi[0]]
            - self.sums[hi[1] * w + lo[0]]
    }
}

/// Maximal dyadic subcubes of the root contained in `e`, sorted by `(level, ix, iy)`.
/// Requires `|E| < |Q| / 4`.
pub fn cz_decompose(e: &CellSet, max_level: u32) -> Result<Vec<DyadicCube>, DyadicError> {
    if e.level > MAX_LEVEL || max_level != e.level {
        return Err(DyadicError::LevelTooDeep(max_level.max(e.level)));
    }
    let total = e.n() * e.n();
    let count = e.count();
    let limit = total / 4 + usize::from(!total.is_multiple_of(4));
    if 4 * count >= total {
        return Err(DyadicError::MeasurePrecondition { cells: count, limit });
    }
    let prefix = PrefixCount::new(e);
    let mut out = Vec::new();
    let mut stack = vec![DyadicCube::ROOT];
    while let Some(q) = stack.pop() {
        let (lo, hi) = q.cell_range(e.level);
        let inside = prefix.rect(lo, hi);
        let size = (hi[0] - lo[0]) * (hi[1] - lo[1]);
        if inside == size {
            out.push(q);
        } else if inside > 0 {
            stack.extend(q.children());
        }
    }
    out.sort();
    Ok(out)
}

/// Cells of the grid whose centres lie in `ball`.
pub fn cells_in_ball(g: &GridFunction, ball: &Ball) -> Vec<bool> {
    let n = g.n();
    let r2 = ball.radius * ball.radius;
    let mut mask = vec![false; n * n];
    for j in 0..n {
        for i in 0..n {
            let c = g.cell_center(i, j);
            let (dx, dy) = (c[0] - ball.center[0], c[1] - ball.center[1]);
            mask[j * n + i] = dx * dx + dy * dy <= r2;
        }
    }
    mask
}

/// Radii, in cell units and squared times four, so lattice disks compare in integers.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusFamily {
    /// `4 rho^2` for each admitted radius `rho` (cell units), increasing.
    pub four_rho2: Vec<u64>,
}

impl RadiusFamily {
    /// `rho_k = 2^{k/2} / 2`, starting at the single-cell disk.
    pub fn ladder(max_rho: f64) -> Self {
        let mut four_rho2 = Vec::new();
        let mut k = 0u32;
        while k < 62 && ((1u64 << k) as f64 / 4.0).sqrt() <= max_rho {
            four_rho2.push(1u64 << k);
            k += 1;
        }
        Self { four_rho2 }
    }

    /// Every distinct lattice distance `sqrt(a^2 + b^2)` up to `max_rho`, including 0.
    pub fn exhaustive(max_rho: f64) -> Self {
        let m = max_rho.floor() as i64;
        let mut v: Vec<u64> = Vec::new();
        for a in 0..=m {
            for b in 0..=a {
                let d2 = (a * a + b * b) as u64;
                if (d2 as f64).sqrt() <= max_rho {
                    v.push(4 * d2);
                }
            }
        }
        v.sort_unstable();
        v.dedup();
        Self { four_rho2: v }
    }

    pub fn rho(&self, k: usize) -> f64 {
        (self.four_rho2[k] as f64 / 4.0).sqrt()
    }

    /// Keeps radii `rho * h >= eps`.
    pub fn truncated(&self, eps_cells: f64) -> Self {
        Self {
            four_rho2: self
                .four_rho2
                .iter()
                .cloned()
                .filter(|&q| (q as f64 / 4.0).sqrt() >= eps_cells * (1.0 - 1e-12))
                .collect(),
        }
    }
}

/// Maximal function restricted to a ball. `mask` marks the cells of `B` reached by at least one
/// admissible disk; values are 0 elsewhere. With the full ladder every cell of `B` is reached by
/// its own single-cell disk; truncated families can leave cells near the rim of `B` unreached.
#[derive(Debug, Clone, PartialEq)]
pub struct MaximalField {
    pub grid: GridFunction,
    pub mask: Vec<bool>,
}

/// Row half-widths of a lattice disk: for row offset `b`, the admitted `|a|` is `<= w[b]`.
fn disk_rows(four_rho2: u64) -> Vec<i64> {
    let rmax = ((four_rho2 as f64 / 4.0).sqrt().floor()) as i64 + 1;
    let mut rows = Vec::new();
    for b in 0..=rmax {
        let rem = four_rho2 as i64 - 4 * b * b;
        if rem < 0 {
            break;
        }
        let mut a = ((rem as f64 / 4.0).sqrt().floor()) as i64 + 1;
        while 4 * a * a > rem {
            a -= 1;
        }
        rows.push(a);
    }
    rows
}

/// Core of the maximal operators: sup of disk averages of `|f|` over disks of the family that
/// contain the cell and sit inside `ball`, containment taken as cell sets.
pub fn maximal_with_family(
    f: &GridFunction,
    ball: &Ball,
    family: &RadiusFamily,
) -> Result<MaximalField, DyadicError> {
    let n = f.n();
    let mask = cells_in_ball(f, ball);
    if !mask.iter().any(|&m| m) {
        return Err(DyadicError::BallMissesGrid);
    }
    let abs: Vec<f64> = f.values.iter().map(|v| v.abs()).collect();
    // row prefix sums of |f|
    let mut row_prefix = vec![0.0; n * (n + 1)];
    for j in 0..n {
        for i in 0..n {
            row_prefix[j * (n + 1) + i + 1] = row_prefix[j * (n + 1) + i] + abs[j * n + i];
        }
    }
    let mut best = vec![0.0f64; n * n];
    let mut covered = vec![false; n * n];
    for k in 0..family.four_rho2.len() {
        let rows = disk_rows(family.four_rho2[k]);
        // disk averages at admissible centres
        let avg: Vec<Option<f64>> = (0..n * n)
            .into_par_iter()
            .with_min_len(64)
            .map(|c| {
                let (ci, cj) = ((c % n) as i64, (c / n) as i64);
                // rows of B's cell set are intervals, so checking row ends suffices
                let inside = |i: i64, j: i64| {
                    i >= 0 && j >= 0 && i < n as i64 && j < n as i64 && mask[j as usize * n + i as usize]
                };
                for (b, &w) in rows.iter().enumerate() {
                    let b = b as i64;
                    for jj in [cj - b, cj + b] {
                        if !inside(ci - w, jj) || !inside(ci + w, jj) {
                            return None;
                        }
                    }
                }
                if rows.len() == 1 && rows[0] == 0 {
                    return Some(abs[c]);
                }
                let mut s = 0.0;
                let mut cnt = 0usize;
                for (b, &w) in rows.iter().enumerate() {
                    let b = b as i64;
                    for (t, jj) in [cj - b, cj + b].into_iter().enumerate() {
                        if (b == 0 && t == 1) || jj < 0 || jj >= n as i64 {
                            continue;
                        }
                        let lo = (ci - w).max(0) as usize;
                        let hi = ((ci + w + 1) as usize).min(n);
                        let row = jj as usize * (n + 1);
                        s += row_prefix[row + hi] - row_prefix[row + lo];
                        cnt += hi - lo;
                    }
                }
                (cnt > 0).then(|| s / cnt as f64)
            })
            .collect();
        // pull: every cell takes the largest average over admissible disks containing it
        best.par_iter_mut().zip(covered.par_iter_mut()).with_min_len(64).enumerate().for_each(|(x, (out, cov))| {
            if !mask[x] {
                return;
            }
            let (xi, xj) = ((x % n) as i64, (x / n) as i64);
            for (b, &w) in rows.iter().enumerate() {
                let b = b as i64;
                for (t, jj) in [xj - b, xj + b].into_iter().enumerate() {
                    if (b == 0 && t == 1) || jj < 0 || jj >= n as i64 {
                        continue;
                    }
                    let lo = (xi - w).max(0);
                    let hi = (xi + w).min(n as i64 - 1);
                    for ii in lo..=hi {
                        if let Some(a) = avg[jj as usize * n + ii as usize] {
                            *cov = true;
                            if a > *out {
                                *out = a;
                            }
                        }
                    }
                }
            }
        });
    }
    Ok(MaximalField {
        grid: GridFunction {
            root: f.root,
            level: f.level,
            values: best,
        },
        mask: mask.iter().zip(&covered).map(|(a, b)| *a && *b).collect(),
    })
}

/// `M_B f` with the default radius ladder.
pub fn local_maximal(f: &GridFunction, ball: &Ball) -> Result<MaximalField, DyadicError> {
    let family = RadiusFamily::ladder(ball.radius / f.h());
    maximal_with_family(f, ball, &family)
}

/// `M_B f` over every lattice radius; the reference for the ladder.
pub fn exhaustive_maximal(f: &GridFunction, ball: &Ball) -> Result<MaximalField, DyadicError> {
    let family = RadiusFamily::exhaustive(ball.radius / f.h());
    maximal_with_family(f, ball, &family)
}

/// `M^eps_B f`: the ladder restricted to radii `>= eps`.
pub fn truncated_maximal(f: &GridFunction, ball: &Ball, eps: f64) -> Result<MaximalField, DyadicError> {
    if !(eps < ball.radius) {
        return Err(DyadicError::EmptyBallFamily {
            eps,
            radius: ball.radius,
        });
    }
    let family = RadiusFamily::ladder(ball.radius / f.h()).truncated(eps / f.h());
    if family.four_rho2.is_empty() {
        return Err(DyadicError::EmptyBallFamily {
            eps,
            radius: ball.radius,
        });
    }
    maximal_with_family(f, ball, &family)
}

/// `max M^eps f / M^{l eps} f` over the cells reached by both truncated families.
pub fn truncation_ratio(f: &GridFunction, ball: &Ball, eps: f64, l: f64) -> Result<f64, DyadicError> {
    let fine = truncated_maximal(f, ball, eps)?;
    let coarse = truncated_maximal(f, ball, l * eps)?;
    let mut worst: f64 = 0.0;
    for c in 0..f.values.len() {
        if fine.mask[c] && coarse.mask[c] {
            let (a, b) = (fine.grid.values[c], coarse.grid.values[c]);
            if a > 0.0 {
                worst = worst.max(if b > 0.0 { a / b } else { f64::INFINITY });
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSet {
    pub threshold: f64,
    pub cube: DyadicCube,
    pub cells: CellSet,
}

/// `{x in Q0 : mf(x) > t}` on the grid of `mf`.
pub fn distribution_set(mf: &GridFunction, q0: DyadicCube, t: f64) -> DistributionSet {
    let mut cells = CellSet::empty(mf.level);
    let (lo, hi) = q0.cell_range(mf.level);
    for j in lo[1]..hi[1] {
        for i in lo[0]..hi[0] {
            if mf.get(i, j) > t {
                cells.insert(i, j);
            }
        }
    }
    DistributionSet {
        threshold: t,
        cube: q0,
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximalBoundsReport {
    pub p: f64,
    /// `sup_t t w{M f > t} / int |f| w`
    pub weak_ratio: f64,
    /// `int (M f)^p w / int |f|^p w`
    pub strong_ratio: f64,
}

/// Weighted weak- and strong-type ratios of `M_B` on the cells of `B`. Cell weights are cell
/// averages of `w`. Without explicit thresholds the weak ratio is a sup over all attained levels.
pub fn verify_weighted_maximal_bounds(
    f: &GridFunction,
    w: &Weight,
    ball: &Ball,
    p: f64,
    thresholds: Option<&[f64]>,
) -> Result<MaximalBoundsReport, DyadicError> {
    let mf = local_maximal(f, ball)?;
    weighted_ratios(f, &mf, w, p, thresholds)
}

pub fn weighted_ratios(
    f: &GridFunction,
    mf: &MaximalField,
    w: &Weight,
    p: f64,
    thresholds: Option<&[f64]>,
) -> Result<MaximalBoundsReport, DyadicError> {
    let n = f.n();
    let h = f.h();
    let cells: Vec<usize> = (0..n * n).filter(|&c| mf.mask[c]).collect();
    let wc: Vec<f64> = cells
        .iter()
        .map(|&c| w.cell_average(f.cell_center(c % n, c / n), h))
        .collect::<Result<_, _>>()?;
    let mut l1 = 0.0;
    let mut lp = 0.0;
    let mut mp = 0.0;
    for (k, &c) in cells.iter().enumerate() {
        let a = f.values[c].abs();
        l1 += a * wc[k];
        lp += a.powf(p) * wc[k];
        mp += mf.grid.values[c].powf(p) * wc[k];
    }
    let mut levels: Vec<(f64, f64)> = cells.iter().zip(&wc).map(|(&c, &wt)| (mf.grid.values[c], wt)).collect();
    levels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let weak_num = match thresholds {
        Some(ts) => ts
            .iter()
            .map(|&t| t * levels.iter().filter(|(v, _)| *v > t).map(|(_, wt)| wt).sum::<f64>())
            .fold(0.0, f64::max),
        None => {
            // t just below each attained level v: t w{M f >= v}
            let mut acc = 0.0;
            let mut best: f64 = 0.0;
            let mut i = 0;
            while i < levels.len() {
                let v = levels[i].0;
                while i < levels.len() && levels[i].0 == v {
                    acc += levels[i].1;
                    i += 1;
                }
                best = best.max(v * acc);
            }
            best
        }
    };
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(MaximalBoundsReport {
        p,
        weak_ratio: ratio(weak_num, l1),
        strong_ratio: ratio(mp, lp),
    })
}
