use thiserror::Error;

/// Errors raised across the simulation and optimization pipeline.
#[derive(Debug, Error)]
pub enum GasnetError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("pipe {pipe}: {reason}")]
    InvalidPipe { pipe: String, reason: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("steady state vacuum/sonic breach on pipe {pipe} at x = {critical_x}")]
    SteadyStateBreach { pipe: String, critical_x: f64 },

    #[error("Kirchhoff infeasible at node {0}")]
    KirchhoffInfeasible(String),

    #[error("pressure continuity infeasible at node {node}: {left} vs {right}")]
    PressureInfeasible { node: String, left: f64, right: f64 },

    #[error("steady state: {0}")]
    SteadyState(String),

    #[error("state box: {0}")]
    StateBox(String),

    #[error("resolution: {0}")]
    Resolution(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("constraint assembly: {0}")]
    Assembly(String),

    #[error("vacuum guard: pressure {pressure} below floor {floor} on pipe {pipe}, node {node}")]
    VacuumGuard {
        pipe: usize,
        node: usize,
        pressure: f64,
        floor: f64,
    },

    #[error("control: {0}")]
    Control(String),

    #[error("linear solver breakdown at step {step}: {reason}")]
    SolverBreakdown { step: usize, reason: String },

    #[error("contraction failure; reduce T or kappa_U (ratios {0:?})")]
    ContractionFailure(Vec<f64>),

    #[error("Picard iteration did not converge in {iters} iterations (last update {last})")]
    PicardNotConverged { iters: usize, last: f64 },

    #[error("horizon limited: ball condition allows only T = {achieved}")]
    HorizonLimited { achieved: f64 },

    #[error("precondition: {0}")]
    Precondition(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GasnetError>;

impl GasnetError {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            GasnetError::Parse(_) => "parse",
            GasnetError::InvalidPipe { .. } => "invalid-pipe",
            GasnetError::InvalidNetwork(_) => "invalid-network",
            GasnetError::SteadyStateBreach { .. } => "steady-state-breach",
            GasnetError::KirchhoffInfeasible(_) => "kirchhoff-infeasible",
            GasnetError::PressureInfeasible { .. } => "pressure-infeasible",
            GasnetError::SteadyState(_) => "steady-state",
            GasnetError::StateBox(_) => "state-box",
            GasnetError::Resolution(_) => "resolution",
            GasnetError::ShapeMismatch { .. } => "shape-mismatch",
            GasnetError::Assembly(_) => "assembly",
            GasnetError::VacuumGuard { .. } => "vacuum-guard",
            GasnetError::Control(_) => "control",
            GasnetError::SolverBreakdown { .. } => "solver-breakdown",
            GasnetError::ContractionFailure(_) => "contraction-failure",
            GasnetError::PicardNotConverged { .. } => "picard-not-converged",
            GasnetError::HorizonLimited { .. } => "horizon-limited",
            GasnetError::Precondition(_) => "precondition",
            GasnetError::Scenario(_) => "scenario",
            GasnetError::Io(_) => "io",
            GasnetError::Csv(_) => "csv",
        }
    }
}
