//! Numerical workbench for singularly perturbed convex graph hypersurfaces.
//!
//! The crate builds convex functions on `R^n` carrying cone-type singular
//! points, smooths them by mollification, and evaluates the differential
//! geometry of their graphs in `R^{n+1}`. On top of that it discretizes the
//! Laplace-Beltrami operator on a chart grid, solves localized Poisson
//! problems, and measures Calderon-Zygmund ratios
//! `|Hess v|_p / (|Δv|_p + |v|_p)` along a smoothing sweep. A separate
//! module splices warping functions of rotationally symmetric model
//! manifolds while keeping sectional curvature above a prescribed bound.

pub mod convexlab;
pub mod czexp;
pub mod error;
pub mod graphgeo;
pub mod meshdisc;
pub mod poisson;
pub mod profile;
pub mod surfaces;
pub mod warped;

pub use convexlab::{Ball, BumpSpec, ConvexSpec, GraphFunction, Jet, SmoothedFunction};
pub use czexp::{CzNorms, CzRecord, SobolevGapReport, SweepConfig, SweepReport};
pub use error::{Error, Result};
pub use graphgeo::{MetricAt, ShapeAt, TangentPlane};
pub use meshdisc::{ChartGrid, CutoffSpec, FieldKind, GridGeometry, ScalarField};
pub use poisson::{BoundaryCondition, DiscreteOperator, SolveReport, SourceSpec};
pub use warped::{AnnuliData, BoundFunction, SplicedWarping, WarpingFunction};
