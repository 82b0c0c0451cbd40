use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("axis {axis} out of range for dimension {n}")]
    AxisOutOfRange { axis: usize, n: usize },

    #[error("derivative order {0} unsupported (expected 1 or 2)")]
    BadDerivativeOrder(usize),

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("weighted norms require a box domain")]
    WeightedNormOnTorus,

    #[error("negative diffusion time kappa*tau = {0}")]
    NegativeDiffusionTime(f64),

    #[error("operation requires dimension >= 2 (got {0})")]
    DimensionTooSmall(usize),

    #[error("kernel evaluated at the singular point x = 0")]
    KernelAtOrigin,

    #[error("{0} requires a box domain")]
    BoxOnly(&'static str),

    #[error("estimate_Cs requires s > n/2 (got s = {s}, n = {n})")]
    WeightTooWeak { s: f64, n: usize },

    #[error("coefficient validation failed: {0}")]
    CoefficientValidation(String),

    #[error("bracket algebra needs polynomial coefficients ({0})")]
    NonPolynomialCoefficient(String),

    #[error("derivative budget exceeded: {0}")]
    DerivativeBudget(String),

    #[error("spectral semigroup backend needs the constant-coefficient specialization")]
    SpectralBackendUnavailable,

    #[error("degenerate sample cloud: axis {axis} has zero variance")]
    DegenerateSampleCloud { axis: usize },

    #[error("insufficient usable density mass for the envelope fit ({0} points)")]
    InsufficientDensityMass(usize),

    #[error("envelope fit failed: {0}")]
    FitFailed(String),

    #[error("insufficient usable radial shells ({found} found, {needed} needed)")]
    InsufficientShells { found: usize, needed: usize },

    #[error("degenerate design matrix in regression")]
    DegenerateRegression,

    #[error("too few points: {0}")]
    TooFewPoints(String),

    #[error("non-positive constant {name} = {value}")]
    NonPositiveConstant { name: &'static str, value: f64 },

    #[error("missing first increment (run the first iterate before increments)")]
    MissingIncrement,

    #[error("NaN detected in Picard iterate at step l = {l}, k = {k}")]
    PicardNan { l: usize, k: usize },

    #[error("unknown control strategy {0}")]
    UnknownStrategy(String),

    #[error("control strategy {0} needs the first increment in its context")]
    MissingDeltaV1(&'static str),

    #[error("snapshot format error: {0}")]
    SnapshotFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
