//! Periodic coefficient tensors `a_ij^{ab}(y)` built from a small closed-form expression set.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FemError;
use crate::geometry::Point;

/// Space dimension. Everything in this crate is planar.
pub const DIM: usize = 2;

/// Sharpness of the default laminate profile.
pub const LAMINATE_SHARPNESS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wave {
    Sin,
    Cos,
    One,
}

impl Wave {
    fn eval(self, t: f64) -> f64 {
        match self {
            Wave::Sin => t.sin(),
            Wave::Cos => t.cos(),
            Wave::One => 1.0,
        }
    }
}

/// `amp * fx(2 pi kx y1) * fy(2 pi ky y2)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub amp: f64,
    pub kx: i32,
    pub ky: i32,
    pub fx: Wave,
    pub fy: Wave,
}

/// One scalar entry of the coefficient tensor, 1-periodic in each variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Profile {
    Constant {
        value: f64,
    },
    Trig {
        mean: f64,
        terms: Vec<TrigTerm>,
    },
    /// `mid + half * tanh(s sin(2 pi k y_axis)) / tanh(s)`, ramping between `low` and `high`.
    Laminate {
        axis: usize,
        low: f64,
        high: f64,
        sharpness: f64,
        frequency: u32,
    },
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Profile::Constant { value }
    }

    pub fn eval(&self, y: Point) -> f64 {
        match self {
            Profile::Constant { value } => *value,
            Profile::Trig { mean, terms } => {
                let mut s = *mean;
                for t in terms {
                    s += t.amp
                        * t.fx.eval(2.0 * PI * t.kx as f64 * y[0])
                        * t.fy.eval(2.0 * PI * t.ky as f64 * y[1]);
                }
                s
            }
            Profile::Laminate {
                axis,
                low,
                high,
                sharpness,
                frequency,
            } => {
                let mid = 0.5 * (low + high);
                let half = 0.5 * (high - low);
                let arg = (2.0 * PI * *frequency as f64 * y[*axis]).sin();
                mid + half * (sharpness * arg).tanh() / sharpness.tanh()
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Profile::Constant { .. } => true,
            Profile::Trig { terms, .. } => terms.iter().all(|t| t.amp == 0.0),
            Profile::Laminate { low, high, .. } => low == high,
        }
    }
}

/// Coefficient tensor stored as a `(m*d) x (m*d)` matrix of profiles; row `(a, i)`,
/// column `(b, j)` holds `a_ij^{ab}`, so the flux is `(A grad u)^a_i = a_ij^{ab} d_j u^b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    name: String,
    m: usize,
    entries: Vec<Profile>,
    mu: f64,
}

impl CoefficientField {
    pub fn new(name: impl Into<String>, m: usize, entries: Vec<Profile>, mu: f64) -> Self {
        assert_eq!(entries.len(), (m * DIM) * (m * DIM), "entry count must be (m d)^2");
        Self {
            name: name.into(),
            m,
            entries,
            mu,
        }
    }

    /// Scalar-valued coefficient `a(y) I` for a single equation.
    pub fn isotropic(name: impl Into<String>, profile: Profile, mu: f64) -> Self {
        let z = Profile::constant(0.0);
        Self::new(name, 1, vec![profile.clone(), z.clone(), z, profile], mu)
    }

    /// Constant tensor from its `(m d) x (m d)` matrix, with `mu` measured from the matrix.
    pub fn constant_matrix(name: impl Into<String>, m: usize, matrix: &[f64]) -> Self {
        let n = m * DIM;
        assert_eq!(matrix.len(), n * n);
        let mat = DMatrix::from_row_slice(n, n, matrix);
        let (lo, hi) = ellipticity_bounds(&mat);
        let entries = matrix.iter().map(|&v| Profile::constant(v)).collect();
        Self::new(name, m, entries, lo.min(1.0 / hi))
    }

    pub fn identity() -> Self {
        Self::isotropic("identity", Profile::constant(1.0), 1.0)
    }

    /// `a(y) = 2 + sin(2 pi y1) sin(2 pi y2)`
    pub fn checkerboard() -> Self {
        Self::isotropic("checkerboard", checkerboard_profile(), 1.0 / 3.0)
    }

    /// Smoothed laminate in `y1` ramping between 1 and 4 with equal volume fractions.
    pub fn laminate() -> Self {
        Self::laminate_with(LAMINATE_SHARPNESS)
    }

    pub fn laminate_with(sharpness: f64) -> Self {
        Self::isotropic(
            "laminate",
            Profile::Laminate {
                axis: 0,
                low: 1.0,
                high: 4.0,
                sharpness,
                frequency: 1,
            },
            0.25,
        )
    }

    /// Fine-scale, nearly discontinuous laminate used at eps = 1.
    pub fn rough() -> Self {
        Self::isotropic(
            "rough",
            Profile::Laminate {
                axis: 0,
                low: 1.0,
                high: 4.0,
                sharpness: 50.0,
                frequency: 8,
            },
            0.25,
        )
    }

    /// Symmetric two-component system: `a(y) delta_ij delta^{ab} + delta_ij (1 - delta^{ab}) / 2`
    /// with the checkerboard `a`.
    pub fn system() -> Self {
        let n = 2 * DIM;
        let mut entries = vec![Profile::constant(0.0); n * n];
        for alpha in 0..2 {
            for beta in 0..2 {
                for i in 0..DIM {
                    let row = alpha * DIM + i;
                    let col = beta * DIM + i;
                    entries[row * n + col] = if alpha == beta {
                        checkerboard_profile()
                    } else {
                        Profile::constant(0.5)
                    };
                }
            }
        }
        Self::new("system", 2, entries, 1.0 / 3.5)
    }

    pub fn by_name(name: &str) -> Result<Self, FemError> {
        match name {
            "identity" => Ok(Self::identity()),
            "checkerboard" => Ok(Self::checkerboard()),
            "laminate" => Ok(Self::laminate()),
            "rough" => Ok(Self::rough()),
            "system" => Ok(Self::system()),
            other => Err(FemError::UnknownCoefficient(other.to_string())),
        }
    }

    pub fn library() -> Vec<Self> {
        vec![
            Self::identity(),
            Self::checkerboard(),
            Self::laminate(),
            Self::rough(),
            Self::system(),
        ]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of equations.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Side of the `(m d) x (m d)` matrix.
    pub fn size(&self) -> usize {
        self.m * DIM
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn entries(&self) -> &[Profile] {
        &self.entries
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(Profile::is_constant)
    }

    /// Structural symmetry `a_ij^{ab} = a_ji^{ba}`.
    pub fn is_symmetric(&self) -> bool {
        let n = self.size();
        (0..n).all(|r| (0..n).all(|c| self.entries[r * n + c] == self.entries[c * n + r]))
    }

    pub fn eval_into(&self, y: Point, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.entries) {
            *o = p.eval(y);
        }
    }

    pub fn eval(&self, y: Point) -> Vec<f64> {
        let mut out = vec![0.0; self.entries.len()];
        self.eval_into(y, &mut out);
        out
    }

    pub fn matrix(&self, y: Point) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size(), self.size(), &self.eval(y))
    }

    /// Spot-check of ellipticity and boundedness on a 32 x 32 sample of the cell,
    /// plus random test matrices `xi`.
    pub fn validate(&self) -> Result<(), FemError> {
        let n = 32;
        let tol = 1e-12;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for j in 0..n {
            for i in 0..n {
                let y = [(i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64];
                let mat = self.matrix(y);
                let (lo, hi) = ellipticity_bounds(&mat);
                if lo < self.mu * (1.0 - tol) || hi > (1.0 + tol) / self.mu {
                    return Err(FemError::CoefficientInvalid {
                        name: self.name.clone(),
                        at: y,
                    });
                }
                let xi: Vec<f64> = (0..self.size()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let xi = nalgebra::DVector::from_vec(xi);
                let form = xi.dot(&(&mat * &xi));
                if form < self.mu * xi.norm_squared() * (1.0 - tol) {
                    return Err(FemError::CoefficientInvalid {
                        name: self.name.clone(),
                        at: y,
                    });
                }
            }
        }
        Ok(())
    }
}

fn checkerboard_profile() -> Profile {
    Profile::Trig {
        mean: 2.0,
        terms: vec![TrigTerm {
            amp: 1.0,
            kx: 1,
            ky: 1,
            fx: Wave::Sin,
            fy: Wave::Sin,
        }],
    }
}

/// Smallest eigenvalue of the symmetric part and the operator norm.
pub fn ellipticity_bounds(mat: &DMatrix<f64>) -> (f64, f64) {
    let sym = (mat + mat.transpose()) * 0.5;
    let lo = sym.symmetric_eigenvalues().min();
    let hi = mat.clone().singular_values().max();
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_is_elliptic_and_periodic() {
        for c in CoefficientField::library() {
            c.validate().unwrap();
            for y in [[0.1, 0.7], [0.33, 0.01], [0.9, 0.45]] {
                let a = c.eval(y);
                let b = c.eval([y[0] + 1.0, y[1] - 2.0]);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-12, "{}", c.name());
                }
            }
            assert!(c.is_symmetric());
        }
    }

    #[test]
    fn mu_matches_library_ranges() {
        assert_eq!(CoefficientField::checkerboard().mu(), 1.0 / 3.0);
        assert_eq!(CoefficientField::laminate().mu(), 0.25);
        let c = CoefficientField::constant_matrix("c", 1, &[2.0, 0.0, 0.0, 0.5]);
        assert!((c.mu() - 0.5).abs() < 1e-14);
        assert!(c.is_constant());
    }

    #[test]
    fn invalid_mu_is_rejected() {
        let c = CoefficientField::isotropic("bad", Profile::constant(1.0), 2.0);
        assert!(matches!(c.validate(), Err(FemError::CoefficientInvalid { .. })));
    }

    #[test]
    fn laminate_profile_range() {
        let p = Profile::Laminate {
            axis: 0,
            low: 1.0,
            high: 4.0,
            sharpness: 2.0,
            frequency: 1,
        };
        assert!((p.eval([0.25, 0.0]) - 4.0).abs() < 1e-14);
        assert!((p.eval([0.75, 0.3]) - 1.0).abs() < 1e-14);
        assert!((p.eval([0.0, 0.9]) - 2.5).abs() < 1e-14);
    }
}
