//! Error type shared by all modules. Diagnostic payloads are carried as
//! `f64` regardless of the working scalar.

/// Library result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Invalid or missing configuration (bad parameter, malformed spec text).
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs outside an operation's domain (mismatched lambda, bad range).
    #[error("domain error: {0}")]
    Domain(String),

    /// Quadrature or iteration failed to reach the requested tolerance.
    #[error("numeric failure: {msg} (achieved {achieved:.3e})")]
    Numeric { msg: String, achieved: f64 },

    /// Energy at or outside a spectral band edge.
    #[error("band edge: |trace| = {trace:.12} exceeds admissible range at lambda = {lambda}")]
    BandEdge { lambda: f64, trace: f64 },

    /// Wronskian of the solution pair is numerically zero.
    #[error("degenerate basis: |W(0)| = {wronskian:.3e} below threshold")]
    DegenerateBasis { wronskian: f64 },

    /// Non-integrable singularity detected inside an integration cell.
    #[error("non-integrable singularity near x = {x:.6}; consider the lp_l1 norm")]
    SingularCell { x: f64 },

    /// |q| reached 1 so the (I+Q) change of variables is singular.
    #[error("singular transform: |q| = {q_abs:.6} at x = {x:.6}")]
    SingularTransform { x: f64, q_abs: f64 },

    /// Solution magnitude overflowed; a diagnostic of unbounded growth.
    #[error("solution overflow at x = {x:.6}")]
    GrowthOverflow { x: f64 },

    /// Data does not span the range an estimator needs.
    #[error("insufficient range: need {needed}, have {got}")]
    InsufficientRange { needed: f64, got: f64 },

    /// Tail truncation estimate failed to decrease under doubling.
    #[error("tail not converged: truncation estimate {estimate:.3e}")]
    TailNotConverged { estimate: f64 },

    /// q-iteration left the contraction region.
    #[error("iteration divergence: |q| reached {q_abs:.4} at x = {x:.6}")]
    IterationDiverged { x: f64, q_abs: f64 },

    /// Grid too coarse for a requested finite-difference quantity.
    #[error("resolution too coarse: relative error {rel_err:.3e}")]
    ResolutionTooCoarse { rel_err: f64 },

    /// Values below the floating point floor over most of the fit range.
    #[error("underflow-dominated data: {0}")]
    UnderflowDominated(String),

    /// Least-squares fit matrix numerically singular.
    #[error("ill-conditioned fit: condition estimate {cond:.3e}")]
    IllConditionedFit { cond: f64 },

    /// Evaluation cost guard tripped (dense high-order transforms).
    #[error("resource limit exceeded: estimated cost {cost:.3e}")]
    ResourceLimit { cost: f64 },

    /// Malformed input text (potential spec block, tabulated CSV).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn numeric(msg: impl Into<String>, achieved: f64) -> Self {
        Error::Numeric { msg: msg.into(), achieved }
    }
}
