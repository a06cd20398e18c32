//! Isothermal semilinear Euler gas dynamics on tree-shaped pipeline networks,
//! with discrete adjoint boundary control.
//!
//! The crate is organised along the computational pipeline:
//!
//! * [`network`]: topology parsing, tree validation and vertex roles.
//! * [`steady_state`]: closed-form equilibria and state boxes.
//! * [`discrete`]: grids, the weighted inner product and the coupled operators.
//! * [`control`]: time-sampled boundary controls and their H² geometry.
//! * [`forward`]: implicit midpoint propagation and the Picard construction.
//! * [`adjoint`]: linearized and adjoint solves, Green identity.
//! * [`optimize`]: cost, Riesz gradient, projected gradient with penalties.
//! * [`scenario`]: scenario documents and model assembly.
//! * [`verify`]: the property battery exposed by the CLI.

pub mod adjoint;
pub mod control;
pub mod discrete;
pub mod error;
pub mod forward;
pub mod io;
pub mod linalg;
pub mod network;
pub mod optimize;
pub mod scenario;
pub mod steady_state;
pub mod verify;

pub use adjoint::{
    adjoint_solve, green_identity_residual, linearized_solve, AdjointTrajectory, GreenResidual,
    SensitivityTrajectory,
};
pub use control::{ControlSignal, Perturbation, Profile, TimeGrid};
pub use discrete::{build_grid, DiscreteOperator, Grid, NetworkState, Resolution};
pub use error::{GasnetError, Result};
pub use forward::{
    constraint_monitor, kirchhoff_residual, linear_solve, picard_solve, pressure_continuity_residual,
    BoxBounds, Face, MarginReport, PicardOptions, StepDiagnostics, Trajectory,
};
pub use network::{
    classify_vertices, parse_network, validate_tree, NetworkTopology, PipeParameters,
    VertexClassification,
};
pub use optimize::{
    cost, delta_homotopy, kkt_residual, optimize, project_feasible, riesz_gradient, CostConfig,
    KktReport, Objective, OptimizationReport, Status, Target,
};
pub use scenario::{Model, Scenario};
pub use steady_state::{
    ball_radius, compute_steady_state, steady_pressure_profile, validate_suitable_set, StateBox,
    SteadyState,
};
