//! Versioned little-endian binary caches for meshes, solutions and corrector sets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::cell::CorrectorSet;
use crate::fem::{FemSolution, SolveStats};
use crate::geometry::{DiagonalPattern, PolygonDomain, TriMesh};

pub const MESH_MAGIC: &[u8; 7] = b"HLMESH1";
pub const SOLUTION_MAGIC: &[u8; 6] = b"HLSOL1";
pub const CELL_MAGIC: &[u8; 7] = b"HLCELL1";

/// Environment variable overriding the cache directory.
pub const CACHE_ENV: &str = "HOMOGLAB_CACHE";
pub const DEFAULT_CACHE_DIR: &str = ".homoglab-cache";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad header: expected {expected}")]
    BadMagic { expected: String },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("cached mesh does not belong to domain {0}")]
    DomainMismatch(String),
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<(), IoError> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(IoError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    Ok(())
}

fn read_len<R: Read>(r: &mut R, limit: u64) -> Result<usize, IoError> {
    let n = r.read_u64::<LittleEndian>()?;
    if n > limit {
        return Err(IoError::Corrupt(format!("length {n}")));
    }
    Ok(n as usize)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, IoError> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<(), IoError> {
    for x in v {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

const MAX_LEN: u64 = 1 << 32;

/// Layout: magic, vertex count (u64), vertices (f64 pairs), triangle count (u64),
/// vertex triples (u32), boundary flags (bitset, LSB first).
pub fn write_mesh<W: Write>(w: &mut W, mesh: &TriMesh) -> Result<(), IoError> {
    w.write_all(MESH_MAGIC)?;
    w.write_u64::<LittleEndian>(mesh.n_vertices() as u64)?;
    for v in mesh.vertices() {
        write_f64s(w, v)?;
    }
    w.write_u64::<LittleEndian>(mesh.n_triangles() as u64)?;
    for t in mesh.triangles() {
        for &v in t {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
    }
    let mut bits = vec![0u8; mesh.n_vertices().div_ceil(8)];
    for (v, &b) in mesh.boundary_flags().iter().enumerate() {
        if b {
            bits[v / 8] |= 1 << (v % 8);
        }
    }
    w.write_all(&bits)?;
    Ok(())
}

/// Reads a mesh written by [`write_mesh`] for `domain`; the grid spacing is the shortest
/// edge of the first triangle and the stored boundary flags must match the domain.
pub fn read_mesh<R: Read>(r: &mut R, domain: &PolygonDomain) -> Result<TriMesh, IoError> {
    check_magic(r, MESH_MAGIC)?;
    let nv = read_len(r, MAX_LEN)?;
    let coords = read_f64s(r, 2 * nv)?;
    let vertices: Vec<[f64; 2]> = coords.chunks(2).map(|c| [c[0], c[1]]).collect();
    let nt = read_len(r, MAX_LEN)?;
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut tri = [0usize; 3];
        for v in &mut tri {
            *v = r.read_u32::<LittleEndian>()? as usize;
            if *v >= nv {
                return Err(IoError::Corrupt(format!("vertex index {v}")));
            }
        }
        triangles.push(tri);
    }
    let mut bits = vec![0u8; nv.div_ceil(8)];
    r.read_exact(&mut bits)?;
    let h = triangles
        .first()
        .map(|t| {
            (0..3)
                .map(|k| {
                    let (a, b) = (vertices[t[k]], vertices[t[(k + 1) % 3]]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .ok_or_else(|| IoError::Corrupt("no triangles".into()))?;
    let mesh = TriMesh::from_parts(domain.clone(), vertices, triangles, h);
    let same = mesh
        .boundary_flags()
        .iter()
        .enumerate()
        .all(|(v, &b)| b == (bits[v / 8] >> (v % 8) & 1 == 1));
    if !same {
        return Err(IoError::DomainMismatch(domain.name().to_string()));
    }
    Ok(mesh)
}

/// Layout: magic, vertex count (u64), m (u32), nodal values (f64), iterations (u64),
/// final residual (f64).
pub fn write_solution<W: Write>(w: &mut W, sol: &FemSolution) -> Result<(), IoError> {
    w.write_all(SOLUTION_MAGIC)?;
    w.write_u64::<LittleEndian>((sol.values.len() / sol.m) as u64)?;
    w.write_u32::<LittleEndian>(sol.m as u32)?;
    write_f64s(w, &sol.values)?;
    w.write_u64::<LittleEndian>(sol.stats.iterations as u64)?;
    w.write_f64::<LittleEndian>(sol.stats.residual)?;
    Ok(())
}

/// Nodal values, component count and solver statistics.
pub fn read_solution<R: Read>(r: &mut R) -> Result<(Vec<f64>, usize, SolveStats), IoError> {
    check_magic(r, SOLUTION_MAGIC)?;
    let nv = read_len(r, MAX_LEN)?;
    let m = r.read_u32::<LittleEndian>()? as usize;
    if m == 0 || m > 16 {
        return Err(IoError::Corrupt(format!("m = {m}")));
    }
    let values = read_f64s(r, nv * m)?;
    let iterations = r.read_u64::<LittleEndian>()? as usize;
    let residual = r.read_f64::<LittleEndian>()?;
    Ok((values, m, SolveStats { iterations, residual }))
}

/// Contents of a corrector cache.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCache {
    pub resolution: usize,
    pub m: usize,
    pub pattern: DiagonalPattern,
    pub a_hat: Vec<f64>,
    /// Per column, nodal values interleaved by component.
    pub chi: Vec<Vec<f64>>,
    /// Per triangle, `[k][row][col]`.
    pub phi: Vec<Vec<f64>>,
}

impl CellCache {
    pub fn from_set(set: &CorrectorSet) -> Self {
        let c = &set.correctors;
        Self {
            resolution: c.mesh.n(),
            m: c.m(),
            pattern: c.mesh.pattern(),
            a_hat: set.a_hat.clone(),
            chi: c.chi.clone(),
            phi: set.phi.phi.clone(),
        }
    }
}

/// Layout: magic, resolution (u32), m (u32), pattern (u8: 0 uniform, 1 alternating),
/// homogenized tensor (`(2m)^2` f64), chi (`2m` columns of `n^2 m` f64), phi
/// (`2 n^2` triangles of `2 (2m)^2` f64).
pub fn write_cell<W: Write>(w: &mut W, cache: &CellCache) -> Result<(), IoError> {
    w.write_all(CELL_MAGIC)?;
    w.write_u32::<LittleEndian>(cache.resolution as u32)?;
    w.write_u32::<LittleEndian>(cache.m as u32)?;
    w.write_u8(match cache.pattern {
        DiagonalPattern::Uniform => 0,
        DiagonalPattern::Alternating => 1,
    })?;
    write_f64s(w, &cache.a_hat)?;
    for col in &cache.chi {
        write_f64s(w, col)?;
    }
    for t in &cache.phi {
        write_f64s(w, t)?;
    }
    Ok(())
}

pub fn read_cell<R: Read>(r: &mut R) -> Result<CellCache, IoError> {
    check_magic(r, CELL_MAGIC)?;
    let resolution = r.read_u32::<LittleEndian>()? as usize;
    let m = r.read_u32::<LittleEndian>()? as usize;
    if resolution == 0 || resolution > 1 << 14 || m == 0 || m > 16 {
        return Err(IoError::Corrupt(format!("resolution {resolution}, m {m}")));
    }
    let pattern = match r.read_u8()? {
        0 => DiagonalPattern::Uniform,
        1 => DiagonalPattern::Alternating,
        p => return Err(IoError::Corrupt(format!("pattern {p}"))),
    };
    let size = 2 * m;
    let nodes = resolution * resolution;
    let a_hat = read_f64s(r, size * size)?;
    let chi = (0..size).map(|_| read_f64s(r, nodes * m)).collect::<Result<_, _>>()?;
    let phi = (0..2 * nodes)
        .map(|_| read_f64s(r, 2 * size * size))
        .collect::<Result<_, _>>()?;
    Ok(CellCache {
        resolution,
        m,
        pattern,
        a_hat,
        chi,
        phi,
    })
}

pub fn save<T: ?Sized>(
    path: &Path,
    value: &T,
    write: impl Fn(&mut BufWriter<File>, &T) -> Result<(), IoError>,
) -> Result<(), IoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn load<T>(path: &Path, read: impl Fn(&mut BufReader<File>) -> Result<T, IoError>) -> Result<T, IoError> {
    read(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CorrectorSet;
    use crate::fem::CoefficientField;
    use crate::geometry::triangulate;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_header() {
        let mut bytes: &[u8] = b"HLMESH2xxxxxxxx";
        let err = read_mesh(&mut bytes, &PolygonDomain::unit_square());
        assert!(matches!(err, Err(IoError::BadMagic { .. })));
    }

    #[test]
    fn mesh_for_other_domain_is_rejected() {
        let mesh = triangulate(&PolygonDomain::l_shape(), 0.125).unwrap();
        let mut buf = Vec::new();
        write_mesh(&mut buf, &mesh).unwrap();
        let err = read_mesh(&mut buf.as_slice(), &PolygonDomain::unit_square());
        assert!(matches!(err, Err(IoError::DomainMismatch(_))));
    }

    #[test]
    fn cell_cache_round_trip() {
        let set = CorrectorSet::compute(&CoefficientField::system(), 16).unwrap();
        let cache = CellCache::from_set(&set);
        let mut buf = Vec::new();
        write_cell(&mut buf, &cache).unwrap();
        assert_eq!(&buf[..7], CELL_MAGIC);
        assert_eq!(read_cell(&mut buf.as_slice()).unwrap(), cache);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn mesh_and_solution_round_trip(k in 4usize..24, seed in 0u64..1000) {
            let dom = PolygonDomain::l_shape();
            let mesh = triangulate(&dom, 1.0 / (2 * k) as f64).unwrap();
            let mut buf = Vec::new();
            write_mesh(&mut buf, &mesh).unwrap();
            let back = read_mesh(&mut buf.as_slice(), &dom).unwrap();
            prop_assert_eq!(back.vertices(), mesh.vertices());
            prop_assert_eq!(back.triangles(), mesh.triangles());
            prop_assert_eq!(back.h(), mesh.h());

            let values: Vec<f64> = (0..mesh.n_vertices() * 2).map(|v| (v as f64 * 0.37 + seed as f64).sin()).collect();
            let sol = FemSolution {
                m: 2,
                values: values.clone(),
                gradients: Vec::new(),
                stats: SolveStats { iterations: seed as usize, residual: 1e-11 },
            };
            let mut buf = Vec::new();
            write_solution(&mut buf, &sol).unwrap();
            let (v, m, stats) = read_solution(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(v, values);
            prop_assert_eq!(m, 2);
            prop_assert_eq!(stats, sol.stats);
        }
    }
}
