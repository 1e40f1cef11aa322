use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("evaluation at singular point {center:?} (distance {distance:e} inside guard radius)")]
    Singular { center: Vec<f64>, distance: f64 },

    #[error("enumeration budget exhausted: requested {requested} bumps, found {found} above radius floor")]
    EnumerationBudget { requested: usize, found: usize },

    #[error("degenerate tangent plane (Gram determinant {0:e})")]
    DegeneratePlane(f64),

    #[error("grid mask is empty")]
    EmptyMask,

    #[error("nodes are disconnected on the grid graph")]
    Disconnected,

    #[error("invalid exponent {0}: need p > 1 for norms and p > n (Hoelder exponent in (0, 1)) for Morrey quotients")]
    InvalidExponent(f64),

    #[error("conjugate gradient did not converge: {iterations} iterations, relative residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("Neumann source has weighted mean {0:e}")]
    MeanViolation(f64),

    #[error("cutoff support violation: {0}")]
    SupportViolation(String),

    #[error("zero denominator: |v|_p + |Δv|_p vanishes")]
    ZeroDenominator,

    #[error("witness {j} has ratio {ratio} < {j}")]
    InsufficientWitness { j: usize, ratio: f64 },

    #[error("convexity gate failed at delta = {delta}: min Hessian eigenvalue {min_eigenvalue:e}")]
    ConvexityGate { delta: f64, min_eigenvalue: f64 },

    #[error("splice infeasible: {0}")]
    Infeasible(String),

    #[error("non-C2 corner of the warping function at t = {0}")]
    Corner(f64),

    #[error("warping function not positive at t = {t} (value {value})")]
    NonPositiveWarping { t: f64, value: f64 },

    #[error("t = {0} outside the warping function domain")]
    OutOfDomain(f64),

    #[error("field format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
