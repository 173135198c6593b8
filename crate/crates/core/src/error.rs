//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("product of two parameter-dependent polynomials is not affine in theta")]
    NonAffineProduct,

    #[error("root solver failed to converge within {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("simulation failed at time step {t}: {source}")]
    Simulation { t: usize, source: Box<Error> },

    #[error("singular model Jacobian E_t at time step {t}")]
    SingularJacobian { t: usize },

    #[error("surrogate states are required but missing from the dataset")]
    MissingStates,

    #[error("matrix is not {0} definite (pivot {pivot:.3e} at index {index})", if *positive { "positive" } else { "negative" })]
    NotDefinite {
        positive: bool,
        pivot: f64,
        index: usize,
    },

    #[error("block pivot at time step {t} is not positive definite")]
    NotDefiniteBlock { t: usize },

    #[error("point is outside the barrier domain (S(theta) is not positive definite)")]
    NotInDomain,

    #[error("equality system A_e theta = b_e is inconsistent (residual {residual:.3e})")]
    InfeasibleEqualities { residual: f64 },

    #[error("phase-I could not find a strictly feasible point (best margin {best_margin:.3e})")]
    Infeasible { best_margin: f64 },

    #[error("line search found no Armijo-satisfying step")]
    LineSearchFailed,

    #[error("eigenvalue iteration did not converge")]
    EigNoConvergence,

    #[error("time budget of {budget_s} s exceeded")]
    TimeBudgetExceeded { budget_s: f64 },

    #[error("generator failed: {0}")]
    Generator(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Domain violations are recoverable inside a line search (the trial point
    /// simply lies outside the feasible region); everything else is a hard error.
    pub fn is_domain_violation(&self) -> bool {
        matches!(
            self,
            Error::NotInDomain
                | Error::NotDefinite { .. }
                | Error::NotDefiniteBlock { .. }
                | Error::SingularJacobian { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
