use thiserror::Error;

use crate::equilibrium::EquilibriumSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown bus id {0}")]
    UnknownBus(u32),

    #[error("unknown inverter id {0}")]
    UnknownInverter(u32),

    #[error("newton solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Option<Box<EquilibriumSolution>>,
    },

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("no equilibrium exists for this operating point: {0}")]
    InfeasiblePoint(String),

    #[error("operating point sits on a piecewise breakpoint ({0}); offset the operating point or pin the branch explicitly")]
    BreakpointAmbiguity(String),

    #[error("algebraic jacobian g_y is singular (condition estimate {condition:.3e})")]
    SingularAlgebraic { condition: f64, null_vector: Vec<f64> },

    #[error("simulation collapsed at t = {time:.4} s: {reason}")]
    SimulationCollapse { time: f64, reason: String },

    #[error("load shedding floor reached: {0}")]
    ShedFloor(String),

    #[error("unknown plot layout `{0}`")]
    UnknownLayout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures map to CLI exit code 2; everything else is a
    /// configuration problem (exit code 1).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularJacobian(_)
                | Error::InfeasiblePoint(_)
                | Error::BreakpointAmbiguity(_)
                | Error::SingularAlgebraic { .. }
                | Error::SimulationCollapse { .. }
                | Error::ShedFloor(_)
        )
    }
}
