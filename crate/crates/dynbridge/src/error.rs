use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("assumption violated: {assumption} at {witness}")]
    AssumptionViolation { assumption: String, witness: String },

    #[error("quadrature did not reach tolerance {tol:e} within {budget} subintervals")]
    QuadratureFailure { tol: f64, budget: usize },

    #[error("could not bracket A^-1(t={t}, u={u}) within |x| <= {bound}")]
    BracketFailure { t: f64, u: f64, bound: f64 },

    #[error("root search failed: {0}")]
    RootFindFailure(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("kernel backend mismatch: {0}")]
    BackendMismatch(String),

    #[error("tail window misses more than {missing:e} of the mass")]
    TailBoundExceeded { missing: f64 },

    #[error("drift Peclet number {peclet:.3} exceeds {limit:.3}; refine dz")]
    StabilityFailure { peclet: f64, limit: f64 },

    #[error("boundary mass {mass:e} exceeds {limit:e}; widen the domain")]
    GridTooSmall { mass: f64, limit: f64 },

    #[error("effective sample size {ess:.1} fell below {floor:.1}")]
    DegenerateWeights { ess: f64, floor: f64 },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("singular regression design")]
    SingularDesign,

    #[error("ODE integration failed: {0}")]
    OdeFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
