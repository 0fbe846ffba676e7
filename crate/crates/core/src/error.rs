use crate::bellman::IterationReport;
use crate::grid::ValueField;
use crate::model::State;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A jump target or queried state lies outside the model's state space.
    #[error("state outside the model domain: {state:?} ({context})")]
    DomainViolation { state: State, context: String },

    /// A trajectory left the flow's guard box or produced non-finite coordinates.
    #[error("flow blow-up at t = {t}: {state:?}")]
    FlowBlowUp { state: State, t: f64 },

    /// Adaptive quadrature hit the subdivision cap before reaching tolerance.
    #[error("quadrature did not converge on [{a}, {b}] (residual {residual:.3e})")]
    QuadratureNonConvergence { a: f64, b: f64, residual: f64 },

    /// The tail of an infinite-horizon integral could not be certified small.
    #[error("integral tail beyond T_max = {t_max} not negligible (estimate {estimate:.3e})")]
    TailNotNegligible { t_max: f64, estimate: f64 },

    /// Value iteration hit the sweep cap; the partial field is attached.
    #[error("value iteration did not converge after {iterations} sweeps (sup change {sup_change:.3e})")]
    NonConvergence {
        iterations: usize,
        sup_change: f64,
        partial: Box<ValueField>,
        reports: Vec<IterationReport>,
    },

    /// Malformed model, grid, or configuration input.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An operation specific to one parameter regime was called in another.
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
