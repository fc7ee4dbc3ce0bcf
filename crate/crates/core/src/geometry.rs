//! Polygonal domains, structured triangulations, distance to the boundary,
//! boundary layers, cutoff functions and ball sampling.
//!
//! Meshes are built on a uniform grid whose spacing divides the bounding box
//! and puts every polygon vertex on a grid node. Each grid cell is split by one
//! diagonal; cells crossed by a 45-degree polygon edge take that diagonal, so
//! polygons with axis-aligned or diagonal edges (the built-ins) are represented
//! exactly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

/// Upper bound on the number of triangles a single mesh may carry.
pub const MAX_TRIANGLES: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("repeated vertex at index {0}")]
    RepeatedVertex(usize),
    #[error("polygon is not simple: edges {0} and {1} intersect")]
    NotSimple(usize, usize),
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("invalid mesh size h = {0}")]
    InvalidResolution(f64),
    #[error("resolution cap exceeded: {0} triangles (cap {MAX_TRIANGLES})")]
    ResolutionCapExceeded(usize),
    #[error("domain is not representable on a structured grid near h = {0}")]
    NotGridConforming(f64),
    #[error("cutoff does not fit: 5*eps = {0} exceeds the inradius {1}")]
    CutoffTooWide(f64, f64),
    #[error("ramp unresolved: mesh size {h} exceeds eps/2 = {half_eps}")]
    RampUnresolved { h: f64, half_eps: f64 },
    #[error("radius range ({0}, {1}) must lie inside (0, {2})")]
    InvalidRadiusRange(f64, f64, f64),
    #[error("no admissible ball after {0} tries")]
    NoAdmissibleBall(usize),
    #[error("unknown domain '{0}'")]
    UnknownDomain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn contains(&self, x: Point) -> bool {
        x[0] >= self.min[0] && x[0] <= self.max[0] && x[1] >= self.min[1] && x[1] <= self.max[1]
    }
}

/// A simple polygon with counterclockwise vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonDomain {
    name: String,
    vertices: Vec<Point>,
    bbox: BBox,
    diameter: f64,
    area: f64,
    max_corner_deviation: f64,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Distance from `x` to the segment `[a, b]`.
pub fn point_segment_distance(x: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x[0] - a[0]) * d[0] + (x[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    dist(x, [a[0] + t * d[0], a[1] + t * d[1]])
}

fn on_segment(p: Point, a: Point, b: Point, tol: f64) -> bool {
    point_segment_distance(p, a, b) <= tol
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let tol = 1e-14;
    (d1.abs() <= tol && on_segment(p1, q1, q2, tol))
        || (d2.abs() <= tol && on_segment(p2, q1, q2, tol))
        || (d3.abs() <= tol && on_segment(q1, p1, p2, tol))
        || (d4.abs() <= tol && on_segment(q2, p1, p2, tol))
}

impl PolygonDomain {
    pub fn new(name: impl Into<String>, vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::TooFewVertices(n));
        }
        for i in 0..n {
            for j in 0..i {
                if dist(vertices[i], vertices[j]) <= 1e-14 {
                    return Err(GeometryError::RepeatedVertex(i));
                }
            }
        }
        // non-adjacent edges must not touch; adjacent edges must not fold back
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                let (c, d) = (vertices[j], vertices[(j + 1) % n]);
                if adjacent {
                    let shared = if j == i + 1 { b } else { a };
                    let (p, q) = if j == i + 1 { (a, d) } else { (b, c) };
                    if cross(shared, p, q).abs() <= 1e-14 {
                        let dp = [p[0] - shared[0], p[1] - shared[1]];
                        let dq = [q[0] - shared[0], q[1] - shared[1]];
                        if dp[0] * dq[0] + dp[1] * dq[1] > 0.0 {
                            return Err(GeometryError::NotSimple(i, j));
                        }
                    }
                } else if segments_intersect(a, b, c, d) {
                    return Err(GeometryError::NotSimple(i, j));
                }
            }
        }
        let signed: f64 = (0..n)
            .map(|i| {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            / 2.0;
        if signed.abs() <= 1e-14 {
            return Err(GeometryError::ZeroArea);
        }
        let mut vertices = vertices;
        if signed < 0.0 {
            vertices.reverse();
        }
        let mut bbox = BBox {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        };
        for v in &vertices {
            for k in 0..2 {
                bbox.min[k] = bbox.min[k].min(v[k]);
                bbox.max[k] = bbox.max[k].max(v[k]);
            }
        }
        let mut diameter: f64 = 0.0;
        for i in 0..n {
            for j in 0..i {
                diameter = diameter.max(dist(vertices[i], vertices[j]));
            }
        }
        let max_corner_deviation = (0..n)
            .map(|i| {
                let prev = vertices[(i + n - 1) % n];
                let cur = vertices[i];
                let next = vertices[(i + 1) % n];
                let a1 = (prev[1] - cur[1]).atan2(prev[0] - cur[0]);
                let a2 = (next[1] - cur[1]).atan2(next[0] - cur[0]);
                // interior angle for a counterclockwise polygon
                let mut interior = a1 - a2;
                while interior <= 0.0 {
                    interior += 2.0 * std::f64::consts::PI;
                }
                while interior > 2.0 * std::f64::consts::PI {
                    interior -= 2.0 * std::f64::consts::PI;
                }
                (interior - std::f64::consts::PI).abs()
            })
            .fold(0.0, f64::max);
        Ok(Self {
            name: name.into(),
            vertices,
            bbox,
            diameter,
            area: signed.abs(),
            max_corner_deviation,
        })
    }

    pub fn unit_square() -> Self {
        Self::new("square", vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    pub fn l_shape() -> Self {
        Self::new(
            "lshape",
            vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [1.0, 0.5],
                [0.5, 0.5],
                [0.5, 1.0],
                [0.0, 1.0],
            ],
        )
        .unwrap()
    }

    /// Unit square whose bottom edge is replaced by four 45-degree teeth of height 1/8.
    pub fn sawtooth() -> Self {
        let mut v = Vec::new();
        for k in 0..4 {
            let x = k as f64 * 0.25;
            v.push([x, 0.0]);
            v.push([x + 0.125, 0.125]);
        }
        v.push([1.0, 0.0]);
        v.push([1.0, 1.0]);
        v.push([0.0, 1.0]);
        Self::new("sawtooth", v).unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self, GeometryError> {
        match name {
            "square" | "unit_square" => Ok(Self::unit_square()),
            "lshape" | "l_shape" | "L" => Ok(Self::l_shape()),
            "sawtooth" => Ok(Self::sawtooth()),
            other => Err(GeometryError::UnknownDomain(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| dist(a, b)).sum()
    }

    /// Largest deviation of a corner angle from a straight angle, in radians.
    pub fn max_corner_deviation(&self) -> f64 {
        self.max_corner_deviation
    }

    /// Exact point-to-polygon-boundary distance; valid for points outside the domain too.
    pub fn distance_to_boundary(&self, x: Point) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(x, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Ray-casting membership test. Points on the boundary may land on either side.
    pub fn contains(&self, x: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > x[1]) != (b[1] > x[1]) {
                let t = (x[1] - a[1]) / (b[1] - a[1]);
                if x[0] < a[0] + t * (b[0] - a[0]) {
                    inside = !inside;
                }
            }
        }
        inside
    }

    fn on_common_edge(&self, p: Point, q: Point, tol: f64) -> bool {
        self.edges()
            .any(|(a, b)| on_segment(p, a, b, tol) && on_segment(q, a, b, tol))
    }

    /// Largest distance to the boundary over interior points (grid search with local refinement).
    pub fn inradius(&self) -> f64 {
        let n = 128;
        let mut best = (0.0, [0.0, 0.0]);
        for j in 0..=n {
            for i in 0..=n {
                let x = [
                    self.bbox.min[0] + self.bbox.width() * i as f64 / n as f64,
                    self.bbox.min[1] + self.bbox.height() * j as f64 / n as f64,
                ];
                if self.contains(x) {
                    let d = self.distance_to_boundary(x);
                    if d > best.0 {
                        best = (d, x);
                    }
                }
            }
        }
        let mut step = self.bbox.width().max(self.bbox.height()) / n as f64;
        while step > 1e-12 {
            let mut improved = false;
            for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let x = [best.1[0] + dx * step, best.1[1] + dy * step];
                if self.contains(x) {
                    let d = self.distance_to_boundary(x);
                    if d > best.0 {
                        best = (d, x);
                        improved = true;
                    }
                }
            }
            if !improved {
                step /= 2.0;
            }
        }
        best.0
    }

    /// Point at arc length `s` along the boundary, starting from the first vertex.
    pub fn boundary_point(&self, s: f64) -> Point {
        let total = self.perimeter();
        let mut s = s.rem_euclid(total);
        for (a, b) in self.edges() {
            let len = dist(a, b);
            if s <= len {
                let t = s / len;
                return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            }
            s -= len;
        }
        self.vertices[0]
    }
}

/// Diagonal used to split each grid cell when no polygon edge forces one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagonalPattern {
    /// Every cell split along its lower-left to upper-right diagonal.
    Uniform,
    /// Diagonal direction alternates like a checkerboard (union-jack pattern).
    Alternating,
}

impl DiagonalPattern {
    /// Whether cell `(i, j)` uses the lower-left to upper-right diagonal.
    pub fn rising(self, i: usize, j: usize) -> bool {
        match self {
            DiagonalPattern::Uniform => true,
            DiagonalPattern::Alternating => (i + j).is_multiple_of(2),
        }
    }
}

/// Split of a grid cell with corners `c00, c10, c11, c01` (counterclockwise triangles).
pub fn split_cell<T: Copy>(c00: T, c10: T, c11: T, c01: T, rising: bool) -> [[T; 3]; 2] {
    if rising {
        [[c00, c10, c11], [c00, c11, c01]]
    } else {
        [[c00, c10, c01], [c10, c11, c01]]
    }
}

/// P1 triangulation of a polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    domain: PolygonDomain,
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    dist: Vec<f64>,
    h: f64,
}

/// Area and barycentric gradients of a triangle.
pub fn triangle_geometry(p: [Point; 3]) -> (f64, [[f64; 2]; 3]) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let area = 0.5 * det;
    let grads = [
        [(p[1][1] - p[2][1]) / det, (p[2][0] - p[1][0]) / det],
        [(p[2][1] - p[0][1]) / det, (p[0][0] - p[2][0]) / det],
        [(p[0][1] - p[1][1]) / det, (p[1][0] - p[0][0]) / det],
    ];
    (area, grads)
}

/// Barycentric coordinates of `x` with respect to the triangle `p`.
pub fn barycentric(p: [Point; 3], x: Point) -> [f64; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let l1 = ((x[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (x[1] - p[0][1])) / det;
    let l2 = ((p[1][0] - p[0][0]) * (x[1] - p[0][1]) - (x[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

pub fn edge_midpoints(p: [Point; 3]) -> [Point; 3] {
    let mid = |a: Point, b: Point| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    [mid(p[0], p[1]), mid(p[1], p[2]), mid(p[2], p[0])]
}

pub fn centroid(p: [Point; 3]) -> Point {
    [
        (p[0][0] + p[1][0] + p[2][0]) / 3.0,
        (p[0][1] + p[1][1] + p[2][1]) / 3.0,
    ]
}

impl TriMesh {
    /// Assemble a mesh from raw parts; boundary flags and distances are recomputed.
    pub fn from_parts(
        domain: PolygonDomain,
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        h: f64,
    ) -> Self {
        let tol = 1e-12 * domain.diameter();
        let dist: Vec<f64> = vertices
            .iter()
            .map(|&v| domain.distance_to_boundary(v))
            .collect();
        let boundary = dist.iter().map(|&d| d <= tol).collect();
        Self {
            domain,
            vertices,
            triangles,
            boundary,
            dist,
            h,
        }
    }

    pub fn domain(&self) -> &PolygonDomain {
        &self.domain
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.boundary[v]
    }

    /// Per-vertex distance to the polygon boundary.
    pub fn vertex_distances(&self) -> &[f64] {
        &self.dist
    }

    /// Grid spacing (leg length of the right triangles).
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn corners(&self, t: usize) -> [Point; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn area(&self, t: usize) -> f64 {
        triangle_geometry(self.corners(t)).0
    }

    pub fn areas(&self) -> Vec<f64> {
        (0..self.n_triangles()).map(|t| self.area(t)).collect()
    }

    pub fn centroid(&self, t: usize) -> Point {
        centroid(self.corners(t))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.area(t)).sum()
    }

    /// Points where weights are sampled on triangle `t`: the three edge midpoints, with
    /// midpoints of boundary edges pushed inward by h/10 toward the centroid.
    pub fn weight_points(&self, t: usize) -> [Point; 3] {
        let c = self.corners(t);
        let g = centroid(c);
        let tri = self.triangles[t];
        let mut mids = edge_midpoints(c);
        let tol = 1e-12 * self.domain.diameter();
        for (k, m) in mids.iter_mut().enumerate() {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if self.boundary[a] && self.boundary[b] && self.domain.distance_to_boundary(*m) <= tol {
                let d = [g[0] - m[0], g[1] - m[1]];
                let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let s = self.h / 10.0 / len;
                *m = [m[0] + s * d[0], m[1] + s * d[1]];
            }
        }
        mids
    }

    /// Vertices lying on edges that belong to exactly one triangle.
    pub fn outer_vertices(&self) -> Vec<bool> {
        let mut count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        let mut flags = vec![false; self.n_vertices()];
        for ((a, b), c) in count {
            if c == 1 {
                flags[a] = true;
                flags[b] = true;
            }
        }
        flags
    }

    /// Mesh made of the triangles selected by `keep`, with vertex and triangle maps back
    /// to the parent mesh.
    pub fn submesh(&self, keep: impl Fn(usize) -> bool) -> SubMesh {
        let mut vmap = vec![usize::MAX; self.n_vertices()];
        let mut parent_vertex = Vec::new();
        let mut parent_triangle = Vec::new();
        let mut triangles = Vec::new();
        for t in 0..self.n_triangles() {
            if !keep(t) {
                continue;
            }
            let mut tri = [0; 3];
            for k in 0..3 {
                let v = self.triangles[t][k];
                if vmap[v] == usize::MAX {
                    vmap[v] = parent_vertex.len();
                    parent_vertex.push(v);
                }
                tri[k] = vmap[v];
            }
            triangles.push(tri);
            parent_triangle.push(t);
        }
        let vertices: Vec<Point> = parent_vertex.iter().map(|&v| self.vertices[v]).collect();
        let boundary = parent_vertex.iter().map(|&v| self.boundary[v]).collect();
        let dist = parent_vertex.iter().map(|&v| self.dist[v]).collect();
        SubMesh {
            mesh: TriMesh {
                domain: self.domain.clone(),
                vertices,
                triangles,
                boundary,
                dist,
                h: self.h,
            },
            parent_vertex,
            parent_triangle,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubMesh {
    pub mesh: TriMesh,
    pub parent_vertex: Vec<usize>,
    pub parent_triangle: Vec<usize>,
}

fn grid_spacing(domain: &PolygonDomain, h: f64) -> Option<(f64, usize, usize)> {
    let bb = domain.bbox();
    let extent = bb.width().max(bb.height());
    let k0 = (extent / h - 1e-9).ceil().max(1.0) as usize;
    let on_grid = |v: f64, s: f64| {
        let r = v / s;
        (r - r.round()).abs() <= 1e-9
    };
    for k in k0..k0.saturating_mul(64).max(k0 + 1) {
        let s = extent / k as f64;
        if !on_grid(bb.width(), s) || !on_grid(bb.height(), s) {
            continue;
        }
        let ok = domain
            .vertices()
            .iter()
            .all(|v| on_grid(v[0] - bb.min[0], s) && on_grid(v[1] - bb.min[1], s));
        if ok {
            let nx = (bb.width() / s).round() as usize;
            let ny = (bb.height() / s).round() as usize;
            return Some((s, nx, ny));
        }
    }
    None
}

/// Structured triangulation with the alternating diagonal pattern.
pub fn triangulate(domain: &PolygonDomain, h: f64) -> Result<TriMesh, GeometryError> {
    triangulate_with(domain, h, DiagonalPattern::Alternating)
}

pub fn triangulate_with(
    domain: &PolygonDomain,
    h: f64,
    pattern: DiagonalPattern,
) -> Result<TriMesh, GeometryError> {
    if !(h > 0.0 && h < domain.diameter()) {
        return Err(GeometryError::InvalidResolution(h));
    }
    let bb = domain.bbox();
    let (s, nx, ny) = grid_spacing(domain, h).ok_or(GeometryError::NotGridConforming(h))?;
    let estimate = 2 * nx * ny;
    if estimate > MAX_TRIANGLES {
        return Err(GeometryError::ResolutionCapExceeded(estimate));
    }
    let node = |i: usize, j: usize| j * (nx + 1) + i;
    let coord = |i: usize, j: usize| [bb.min[0] + i as f64 * s, bb.min[1] + j as f64 * s];
    let tol = 1e-9 * s;
    let mut triangles = Vec::with_capacity(estimate);
    for j in 0..ny {
        for i in 0..nx {
            let center = [bb.min[0] + (i as f64 + 0.5) * s, bb.min[1] + (j as f64 + 0.5) * s];
            let mut rising = pattern.rising(i, j);
            if domain.distance_to_boundary(center) < s {
                if domain.on_common_edge(coord(i, j), coord(i + 1, j + 1), tol) {
                    rising = true;
                } else if domain.on_common_edge(coord(i + 1, j), coord(i, j + 1), tol) {
                    rising = false;
                }
            }
            for tri in split_cell(node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1), rising) {
                let pts = [0, 1, 2].map(|k| {
                    let n = tri[k];
                    coord(n % (nx + 1), n / (nx + 1))
                });
                if domain.contains(centroid(pts)) {
                    triangles.push(tri);
                }
            }
        }
    }
    // compact the vertex numbering, keeping row-major order
    let mut used = vec![false; (nx + 1) * (ny + 1)];
    for tri in &triangles {
        for &v in tri {
            used[v] = true;
        }
    }
    let mut map = vec![usize::MAX; used.len()];
    let mut vertices = Vec::new();
    for (n, &u) in used.iter().enumerate() {
        if u {
            map[n] = vertices.len();
            vertices.push(coord(n % (nx + 1), n / (nx + 1)));
        }
    }
    for tri in &mut triangles {
        for v in tri.iter_mut() {
            *v = map[*v];
        }
    }
    let mesh = TriMesh::from_parts(domain.clone(), vertices, triangles, s);
    if (mesh.total_area() - domain.area()).abs() > 1e-10 * domain.area() {
        return Err(GeometryError::NotGridConforming(h));
    }
    Ok(mesh)
}

/// Triangles whose centroid lies within distance `t` of the boundary.
pub fn boundary_layer(mesh: &TriMesh, t: f64) -> Vec<usize> {
    (0..mesh.n_triangles())
        .filter(|&k| mesh.domain().distance_to_boundary(mesh.centroid(k)) < t)
        .collect()
}

/// Piecewise-linear cutoff: 0 within 4 eps of the boundary, 1 beyond 5 eps, linear between.
pub fn build_cutoff(mesh: &TriMesh, eps: f64) -> Result<Vec<f64>, GeometryError> {
    let inradius = mesh.domain().inradius();
    if 5.0 * eps >= inradius {
        return Err(GeometryError::CutoffTooWide(5.0 * eps, inradius));
    }
    build_cutoff_unchecked(mesh, eps)
}

/// As [`build_cutoff`] but without the inradius requirement; the cutoff may vanish
/// identically when 4 eps reaches the inradius.
pub fn build_cutoff_unchecked(mesh: &TriMesh, eps: f64) -> Result<Vec<f64>, GeometryError> {
    if mesh.h() > eps / 2.0 {
        return Err(GeometryError::RampUnresolved {
            h: mesh.h(),
            half_eps: eps / 2.0,
        });
    }
    Ok(mesh
        .vertex_distances()
        .iter()
        .map(|&d| cutoff_value(d, eps))
        .collect())
}

pub fn cutoff_value(d: f64, eps: f64) -> f64 {
    ((d - 4.0 * eps) / eps).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, x: Point) -> bool {
        dist(x, self.center) < self.radius
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center,
            radius: self.radius * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BallKind {
    /// 4B lies inside the domain.
    Interior,
    /// Centered on the boundary with radius below c0 * diam.
    Boundary,
}

impl BallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BallKind::Interior => "interior",
            BallKind::Boundary => "boundary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub ball: Ball,
    pub kind: BallKind,
}

pub const DEFAULT_C0: f64 = 0.1;

const MAX_BALL_TRIES: usize = 10_000;

/// Deterministic sampling of admissible balls with log-uniform radii.
pub fn sample_balls(
    domain: &PolygonDomain,
    kind: BallKind,
    count: usize,
    radius_range: (f64, f64),
    seed: u64,
    c0: f64,
) -> Result<Vec<BallSpec>, GeometryError> {
    let (r0, r1) = radius_range;
    let cap = c0 * domain.diameter();
    if !(r0 > 0.0 && r0 <= r1 && r1 < cap) {
        return Err(GeometryError::InvalidRadiusRange(r0, r1, cap));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = domain.bbox();
    let perimeter = domain.perimeter();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..MAX_BALL_TRIES {
            let radius = if r1 > r0 {
                (r0.ln() + rng.gen::<f64>() * (r1.ln() - r0.ln())).exp()
            } else {
                r0
            };
            match kind {
                BallKind::Boundary => {
                    let center = domain.boundary_point(rng.gen::<f64>() * perimeter);
                    found = Some(Ball { center, radius });
                }
                BallKind::Interior => {
                    let center = [
                        bb.min[0] + rng.gen::<f64>() * bb.width(),
                        bb.min[1] + rng.gen::<f64>() * bb.height(),
                    ];
                    if domain.contains(center) && domain.distance_to_boundary(center) >= 4.0 * radius {
                        found = Some(Ball { center, radius });
                    }
                }
            }
            if found.is_some() {
                break;
            }
        }
        let ball = found.ok_or(GeometryError::NoAdmissibleBall(MAX_BALL_TRIES))?;
        out.push(BallSpec { ball, kind });
    }
    Ok(out)
}
