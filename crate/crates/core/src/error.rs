use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid mismatch between `{left}` and `{right}`")]
    GridMismatch { left: String, right: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("empty domain mask `{0}`")]
    EmptyMask(String),

    #[error("unknown domain family kind `{0}`")]
    UnknownFamily(String),

    #[error("ellipticity check failed: {0}")]
    NotElliptic(String),

    #[error("singular factorization at pivot {pivot}")]
    SingularMatrix { pivot: usize },

    #[error("eigensolver did not converge; best residuals {residuals:?}")]
    EigenNonConvergence { residuals: Vec<f64> },

    #[error("equilibrium is not hyperbolic: {count} eigenvalue(s) within {tau_c:e} of the imaginary axis")]
    NotHyperbolic { count: usize, tau_c: f64 },

    #[error("defective eigenvalue {re}{im:+}i: left/right pairing {pairing:e}")]
    DefectiveEigenvalue { re: f64, im: f64, pairing: f64 },

    #[error("basis conditioning collapsed: {conditioning:e} < {threshold:e}")]
    ConditioningCollapse { conditioning: f64, threshold: f64 },

    #[error("negative time {0} is only allowed on the finite-dimensional X+ group")]
    NegativeTime(f64),

    #[error("time integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("dichotomy fit failed: {0}")]
    Dichotomy(String),

    #[error("renormed norm truncation did not certify decay after {doublings} doublings (tail ratio {ratio:e})")]
    Truncation { doublings: usize, ratio: f64 },

    #[error("infeasible cone parameters: {0}")]
    Infeasible(String),

    #[error("graph transform: {0}")]
    GraphTransform(String),

    #[error("graph transform is not contracting: ratios {ratios:?}")]
    NonContraction { ratios: Vec<f64> },

    #[error("stable shooting failed: {0}")]
    Shooting(String),

    #[error("unsupported X+ dimension {0} (only 1 and 2 are supported)")]
    UnsupportedDimension(usize),

    #[error("empty point set")]
    EmptySet,

    #[error("sweep failed: {0}")]
    Sweep(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
