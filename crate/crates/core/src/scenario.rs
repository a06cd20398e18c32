//! Scenario documents and the assembled numerical model they describe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::control::{ControlBounds, ControlSignal, H2Gram, Perturbation, TimeGrid};
use crate::discrete::{build_grid, DiscreteOperator, Resolution};
use crate::error::{GasnetError, Result};
use crate::forward::{picard_solve, BoxBounds, ForwardContext, PicardOptions, Trajectory};
use crate::io;
use crate::network::{parse_network, validate_tree, NetworkTopology};
use crate::optimize::{CostConfig, OptimizerSettings, PenaltySchedule, Target};
use crate::steady_state::{
    ball_radius, compute_steady_state, validate_suitable_set, PipeBox, StateBox, SteadyState, SteadyStateData,
};

/// Spatial resolution: exactly one of the two keys.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nodes_per_meter: Option<f64>,
    pub per_pipe: Option<BTreeMap<String, usize>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    /// CSV with columns `t, slot, value`, relative to the scenario file.
    pub file: Option<String>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantState {
    pub p: f64,
    pub q: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// The equilibrium, optionally shifted by constant offsets.
    Equilibrium {
        #[serde(default)]
        p_offset: f64,
        #[serde(default)]
        q_offset: f64,
    },
    /// Constant `(p, q)` per pipe id.
    Constant { pipes: BTreeMap<String, ConstantState> },
    /// A trajectory CSV on the scenario grid.
    TrajectoryFile { path: String },
    /// The state produced by the given control perturbations.
    Manufactured { perturbations: Vec<Perturbation> },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Equilibrium {
            p_offset: 0.0,
            q_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomotopySpec {
    pub deltas: Vec<f64>,
}

fn default_sigma() -> f64 {
    1e-3
}
fn default_eta() -> f64 {
    1.0
}
fn default_tol_active() -> f64 {
    1e-6
}
fn default_kkt_samples() -> usize {
    100
}

/// A self-contained run description.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Path to a network document, or the network inline as a table.
    pub network: toml::Value,
    pub steady_state: SteadyStateData,
    /// Suitable set: defines the pressure floor and the Lipschitz bound.
    pub state_box: BTreeMap<String, PipeBox>,
    /// Inner box fixing the ball radius; defaults to the equilibrium margin.
    pub inner_box: Option<BTreeMap<String, PipeBox>>,
    /// State constraints of the control problem; defaults to `state_box`.
    pub constraint_box: Option<BTreeMap<String, PipeBox>>,
    pub grid: GridSpec,
    pub horizon: f64,
    pub time_steps: usize,
    #[serde(default)]
    pub picard: PicardOptions,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Defaults to `r / (10 c₁)`.
    pub kappa_u: Option<f64>,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub penalty: PenaltySchedule,
    pub homotopy: Option<HomotopySpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol_active")]
    pub tol_active: f64,
    #[serde(default = "default_kkt_samples")]
    pub kkt_samples: usize,
    /// Directory for resolving relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_toml(document: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut s: Scenario = toml::from_str(document).map_err(|e| GasnetError::Scenario(e.to_string()))?;
        s.base_dir = base_dir.into();
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        let topology = match &self.network {
            toml::Value::String(path) => {
                let p = self.resolve(path);
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| GasnetError::Scenario(format!("network: cannot read {}: {e}", p.display())))?;
                parse_network(&text)?
            }
            toml::Value::Table(table) => {
                let text = toml::to_string(table).map_err(|e| GasnetError::Scenario(format!("network: {e}")))?;
                parse_network(&text)?
            }
            _ => return Err(GasnetError::Scenario("network: expected a path or a table".into())),
        };
        validate_tree(&topology).into_result()?;
        Ok(topology)
    }

    fn resolution(&self, topology: &NetworkTopology) -> Result<Resolution> {
        match (&self.grid.nodes_per_meter, &self.grid.per_pipe) {
            (Some(n), None) => Ok(Resolution::NodesPerMeter(*n)),
            (None, Some(map)) => {
                for id in map.keys() {
                    if topology.pipe_index(id).is_none() {
                        return Err(GasnetError::Scenario(format!("grid.per_pipe: unknown pipe {id}")));
                    }
                }
                let cells = topology
                    .pipes
                    .iter()
                    .map(|p| {
                        map.get(&p.id)
                            .copied()
                            .ok_or_else(|| GasnetError::Scenario(format!("grid.per_pipe: missing pipe {}", p.id)))
                    })
                    .collect::<Result<_>>()?;
                Ok(Resolution::PerPipe(cells))
            }
            _ => Err(GasnetError::Scenario(
                "grid: give exactly one of nodes_per_meter or per_pipe".into(),
            )),
        }
    }
}

/// Every assembled object needed by the simulate, optimize and verify drivers.
#[derive(Clone, Debug)]
pub struct Model {
    pub topology: NetworkTopology,
    pub steady: SteadyState,
    pub op: DiscreteOperator,
    /// Discrete equilibrium, the initial state.
    pub v_e: Vec<f64>,
    /// Closed-form equilibrium sampled on the grid.
    pub v_e_analytic: Vec<f64>,
    pub state_box: StateBox,
    /// Bounds of the suitable set.
    pub bounds: BoxBounds,
    /// Bounds of the state constraints.
    pub constraint_bounds: BoxBounds,
    pub radius: f64,
    pub c1: f64,
    pub control_bounds: ControlBounds,
    pub time: TimeGrid,
    pub phi_e: Vec<f64>,
    pub gram: H2Gram,
    pub picard: PicardOptions,
    pub cost: CostConfig,
    /// Control configured for `simulate`.
    pub control: ControlSignal,
    pub deltas: Vec<f64>,
}

fn equilibrium_data(op: &DiscreteOperator, topology: &NetworkTopology, steady: &SteadyState) -> Vec<f64> {
    let mut phi = vec![0.0; op.num_slots()];
    for k in 0..topology.num_pipes() {
        if op.active_slots[2 * k] {
            phi[2 * k] = steady.pipes[k].p_in;
        }
        if op.active_slots[2 * k + 1] {
            phi[2 * k + 1] = steady.pipes[k].q;
        }
    }
    phi
}

fn perturbation_control(time: TimeGrid, phi_e: &[f64], active: &[bool], ps: &[Perturbation]) -> Result<ControlSignal> {
    for p in ps {
        if p.slot >= 1 && p.slot <= active.len() && !active[p.slot - 1] {
            return Err(GasnetError::Scenario(format!(
                "control: slot {} is not attached to a boundary vertex",
                p.slot
            )));
        }
    }
    ControlSignal::perturbed(time, phi_e, ps)
}

impl Model {
    pub fn from_scenario(s: &Scenario) -> Result<Self> {
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(GasnetError::Scenario(format!("horizon must be positive, got {}", s.horizon)));
        }
        if !(s.sigma > 0.0) {
            return Err(GasnetError::Scenario(format!("sigma must be positive, got {}", s.sigma)));
        }
        if !(s.eta > 0.0) {
            return Err(GasnetError::Scenario(format!("eta must be positive, got {}", s.eta)));
        }
        let topology = s.topology()?;
        let steady = compute_steady_state(&topology, &s.steady_state)?;
        let state_box = StateBox::from_map(&topology, &s.state_box)?;
        let margin = validate_suitable_set(&state_box, &steady).into_result()?;
        let radius = match &s.inner_box {
            Some(map) => ball_radius(&StateBox::from_map(&topology, map)?, &state_box)?,
            None => margin,
        };

        let grid = build_grid(&topology, &s.resolution(&topology)?)?;
        let op = DiscreteOperator::assemble(&topology, &grid)?.with_pressure_floor(state_box.min_pressure() / 2.0);
        let v_e_analytic = op.sample_steady(&steady);
        let v_e = op.discrete_equilibrium(&v_e_analytic)?;
        let bounds = BoxBounds::from_state_box(&op, &state_box);
        if bounds.margin(&v_e) <= 0.0 {
            return Err(GasnetError::StateBox("discrete equilibrium not interior".into()));
        }
        let constraint_bounds = match &s.constraint_box {
            Some(map) => BoxBounds::from_state_box(&op, &StateBox::from_map(&topology, map)?),
            None => bounds.clone(),
        };

        let phi_e = equilibrium_data(&op, &topology, &steady);
        let unit: Vec<f64> = op.active_slots.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        let c1 = op.h1_norm(&op.lift_boundary(&unit)?);
        let kappa_u = s.kappa_u.unwrap_or(radius / (10.0 * c1));
        let control_bounds = ControlBounds { eta: s.eta, kappa_u };
        ForwardContext::new(&op, &v_e, radius, c1, kappa_u, &bounds)?;

        let time = TimeGrid::new(s.horizon, s.time_steps)?;
        let gram = H2Gram::new(&time)?;
        let control = match &s.control.file {
            Some(f) => {
                if !s.control.perturbations.is_empty() {
                    return Err(GasnetError::Scenario("control: give either file or perturbations".into()));
                }
                io::read_control(&s.resolve(f), time, op.num_slots())?
            }
            None => perturbation_control(time, &phi_e, &op.active_slots, &s.control.perturbations)?,
        };

        let mut cost = CostConfig::new(Target::constant(v_e.clone()));
        cost.sigma = s.sigma;
        cost.optimizer = s.optimizer;
        cost.penalty = s.penalty;
        cost.tol_active = s.tol_active;
        cost.kkt_samples = s.kkt_samples;
        cost.seed = s.seed;

        let mut model = Model {
            topology,
            steady,
            op,
            v_e,
            v_e_analytic,
            state_box,
            bounds,
            constraint_bounds,
            radius,
            c1,
            control_bounds,
            time,
            phi_e,
            gram,
            picard: s.picard,
            cost,
            control,
            deltas: s.homotopy.as_ref().map(|h| h.deltas.clone()).unwrap_or_default(),
        };
        model.cost.target = model.build_target(s)?;
        Ok(model)
    }

    fn build_target(&self, s: &Scenario) -> Result<Target> {
        let target = match &s.target {
            TargetSpec::Equilibrium { p_offset, q_offset } => {
                let mut v = self.v_e.clone();
                for (i, x) in v.iter_mut().enumerate() {
                    *x += if i % 2 == 0 { p_offset } else { q_offset };
                }
                Target::constant(v)
            }
            TargetSpec::Constant { pipes } => {
                let g = &self.op.grid;
                let mut v = vec![0.0; g.len()];
                for (k, pipe) in self.topology.pipes.iter().enumerate() {
                    let c = pipes
                        .get(&pipe.id)
                        .ok_or_else(|| GasnetError::Scenario(format!("target.pipes: missing pipe {}", pipe.id)))?;
                    for i in 0..=g.cells[k] {
                        v[g.p(k, i)] = c.p;
                        v[g.q(k, i)] = c.q;
                    }
                }
                Target::constant(v)
            }
            TargetSpec::TrajectoryFile { path } => Target {
                states: io::read_states(&s.resolve(path), &self.op.grid, &self.time)?,
            },
            TargetSpec::Manufactured { perturbations } => {
                let phi = perturbation_control(self.time, &self.phi_e, &self.op.active_slots, perturbations)?;
                let traj = self.solve(&phi)?;
                if traj.truncated {
                    return Err(GasnetError::Scenario(
                        "target: manufactured control leaves the ball around the equilibrium".into(),
                    ));
                }
                Target { states: traj.states }
            }
        };
        for v in &target.states {
            if self.bounds.margin(v) <= 0.0 {
                return Err(GasnetError::Scenario("target: not interior to the state box".into()));
            }
        }
        Ok(target)
    }

    pub fn context(&self) -> Result<ForwardContext<'_>> {
        ForwardContext::new(
            &self.op,
            &self.v_e,
            self.radius,
            self.c1,
            self.control_bounds.kappa_u,
            &self.constraint_bounds,
        )
    }

    /// Forward solve for the full control `phi`.
    pub fn solve(&self, phi: &ControlSignal) -> Result<Trajectory> {
        picard_solve(&self.context()?, phi, &self.picard)
    }

    /// Zero reduced control on this model's time grid.
    pub fn zero_control(&self) -> ControlSignal {
        ControlSignal::constant(self.time, &vec![0.0; self.op.num_slots()])
    }
}
