use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("adaptive quadrature did not converge on [{a}, {b}] within the depth limit")]
    NotConverged { a: f64, b: f64 },
    #[error("integrand produced a non-finite value on [{a}, {b}]")]
    NonFinite { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy scale must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("parameter vector has dimension {got}, feature map has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector contains a non-finite entry")]
    NonFiniteTheta,
    #[error("state list is empty")]
    EmptyStates,
    #[error("invalid feature map: {0}")]
    InvalidFeatures(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradientError {
    #[error("trajectory was generated under a different parameter vector than the one supplied")]
    OffPolicy,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MirrorError {
    #[error("policy-KL geometry needs a nonempty state batch")]
    EmptyStateBatch,
    #[error("prox step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error(
        "inner prox solver diverged at inner step {step}; the outer step size is likely too large"
    )]
    InnerSolverDiverged { step: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input to the prox step")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgoError {
    #[error("invalid algorithm configuration: {0}")]
    InvalidConfig(String),
    #[error("iterate norm {theta_norm} exceeded the divergence threshold at iteration {k}")]
    NumericalDivergence { k: usize, theta_norm: f64 },
    #[error(transparent)]
    Mirror(#[from] MirrorError),
    #[error(transparent)]
    Gradient(#[from] GradientError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}
