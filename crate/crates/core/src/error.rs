use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("singular matrix (zero pivot at column {pivot})")]
    SingularMatrix { pivot: usize },
    #[error("eigenvalue iteration did not converge after {iterations} sweeps")]
    NoConvergence { iterations: usize },
    #[error("symmetric rows disagree at reduced row {row}, column {col} (|diff| = {diff:e})")]
    InconsistentSymmetry { row: usize, col: usize, diff: f64 },
    #[error("moment propagation overflowed at t = {time}")]
    Overflow { time: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{model}` has no variant `{variant}`")]
    UnknownVariant { model: String, variant: String },
    #[error("model `{model}` has no parameter `{param}`")]
    UnknownParameter { model: String, param: String },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("model `{0}` provides no analytic Jacobian")]
    MissingAnalyticJacobian(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("Newton iteration did not converge in {iterations} iterations (|F| = {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian during Newton iteration")]
    SingularJacobian,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("equilibrium is not mean-square stable (max real eigenvalue {lambda_max:e})")]
    NotMeanSquareStable { lambda_max: f64 },
    #[error("missing inputs: {0}")]
    MissingInputs(String),
    #[error("model `{0}` carries no remainder metadata")]
    MissingRemainderMeta(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("need at least 2 paths for standard errors, got {0}")]
    TooFewPaths(usize),
}
