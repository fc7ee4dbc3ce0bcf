//! Numerical laboratory for weighted L2 estimates in periodic homogenization: periodic
//! correctors and the homogenized matrix, Muckenhoupt-type weights, dyadic maximal
//! machinery, and harnesses that measure the constants of the weighted inequalities.

pub mod cell;
pub mod config;
pub mod dyadic;
pub mod estimates;
pub mod fem;
pub mod geometry;
pub mod io;
pub mod report;
pub mod weights;

pub use cell::{CorrectorSet, CellError};
pub use config::{ConfigError, ExperimentConfig};
pub use dyadic::DyadicError;
pub use estimates::{ConstantEstimate, EstimateError, RateFit, SweepReport};
pub use fem::{CoefficientField, FemError, SolverConfig};
pub use geometry::{GeometryError, PolygonDomain, TriMesh};
pub use io::IoError;
pub use report::ReportError;
pub use weights::{Weight, WeightError};

/// Any failure raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Dyadic(#[from] DyadicError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Report(#[from] ReportError),
}
