//! Forward propagation: the implicit midpoint rule on the constrained space,
//! the Picard construction for the semilinear system, junction residuals and
//! the state-constraint monitor.

use serde::Serialize;

use crate::control::{ControlSignal, TimeGrid};
use crate::discrete::{ConstrainedSolver, DiscreteOperator, Generator};
use crate::error::{GasnetError, Result};
use crate::steady_state::StateBox;

/// Picard iteration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardOptions {
    /// Stopping threshold on `max_j ‖v_{k+1}(t_j) − v_k(t_j)‖_M`.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iters() -> usize {
    50
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iters: default_max_iters(),
        }
    }
}

/// Pointwise lower and upper bounds for every state entry.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn from_state_box(op: &DiscreteOperator, state_box: &StateBox) -> Self {
        let g = &op.grid;
        let (mut lower, mut upper) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        for (k, b) in state_box.pipes.iter().enumerate() {
            for i in 0..=g.cells[k] {
                lower[g.p(k, i)] = b.p.lo;
                upper[g.p(k, i)] = b.p.hi;
                lower[g.q(k, i)] = b.q.lo;
                upper[g.q(k, i)] = b.q.hi;
            }
        }
        Self { lower, upper }
    }

    /// Affine shrink `(1 − δ) v_e + δ K` applied face by face.
    pub fn shrink(&self, v_e: &[f64], delta: f64) -> Self {
        let map = |b: &[f64]| b.iter().zip(v_e).map(|(b, e)| (1.0 - delta) * e + delta * b).collect();
        Self {
            lower: map(&self.lower),
            upper: map(&self.upper),
        }
    }

    /// Signed excess of `v` over the box (zero inside).
    pub fn violation(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&lo, &hi))| {
                if x > hi {
                    x - hi
                } else if x < lo {
                    x - lo
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Smallest signed distance to a face (negative outside).
    pub fn margin(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&lo, &hi))| (x - lo).min(hi - x))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Data shared by every forward solve on one discretized scenario.
#[derive(Clone, Copy, Debug)]
pub struct ForwardContext<'a> {
    pub op: &'a DiscreteOperator,
    /// Discrete equilibrium, the initial state.
    pub v_e: &'a [f64],
    /// Ball radius `r` around the equilibrium.
    pub radius: f64,
    /// `c₁ κ_U`.
    pub lift_bound: f64,
    pub bounds: &'a BoxBounds,
}

impl<'a> ForwardContext<'a> {
    pub fn new(
        op: &'a DiscreteOperator,
        v_e: &'a [f64],
        radius: f64,
        c1: f64,
        kappa_u: f64,
        bounds: &'a BoxBounds,
    ) -> Result<Self> {
        let lift_bound = c1 * kappa_u;
        if !(radius > 0.0) {
            return Err(GasnetError::Precondition(format!("ball radius r = {radius} must be positive")));
        }
        if lift_bound > radius / 10.0 * (1.0 + 1e-12) {
            return Err(GasnetError::Precondition(format!(
                "c1 * kappa_U = {lift_bound} exceeds r / 10 = {}",
                radius / 10.0
            )));
        }
        Ok(Self {
            op,
            v_e,
            radius,
            lift_bound,
            bounds,
        })
    }

    /// Admissible sup distance of iterates from the equilibrium, `r − c₁κ_U`.
    pub fn tube(&self) -> f64 {
        self.radius - self.lift_bound
    }
}

/// A priori continuity estimate evaluated on one linear solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContinuityCheck {
    /// `max_n ‖u^n‖_M`.
    pub max_norm: f64,
    /// Discrete growth bound built from `‖P‖`, `‖u⁰‖_M` and the forcing.
    pub bound: f64,
}

impl ContinuityCheck {
    pub fn holds(&self) -> bool {
        self.max_norm <= self.bound * (1.0 + 1e-10) + 1e-300
    }
}

/// Output of [`linear_solve`].
#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub states: Vec<Vec<f64>>,
    pub continuity: ContinuityCheck,
}

/// Implicit midpoint steps `Π(I − τ/2 K) u^{n+1} = Π[(I + τ/2 K) u^n + τ/2 (f^n + f^{n+1})]`.
fn propagate(
    op: &DiscreteOperator,
    solver: &ConstrainedSolver,
    source_norm: f64,
    u0: &[f64],
    forcing: &[Vec<f64>],
    tau: f64,
) -> Result<LinearSolution> {
    let theta = 0.5 * tau;
    let n = u0.len();
    let mut states = Vec::with_capacity(forcing.len());
    states.push(u0.to_vec());
    let mut ku = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let growth = (1.0 + theta * source_norm) / (1.0 - theta * source_norm);
    let mut bound = op.norm(u0);
    let mut max_norm = bound;
    for step in 0..forcing.len() - 1 {
        let u = &states[step];
        solver.apply_generator(u, &mut ku);
        let (f0, f1) = (&forcing[step], &forcing[step + 1]);
        for i in 0..n {
            rhs[i] = u[i] + theta * (ku[i] + f0[i] + f1[i]);
        }
        let next = solver.solve(&rhs);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GasnetError::SolverBreakdown {
                step: step + 1,
                reason: "non-finite state".into(),
            });
        }
        let mean: Vec<f64> = f0.iter().zip(f1).map(|(a, b)| 0.5 * (a + b)).collect();
        bound = growth * bound + tau * op.norm(&mean) / (1.0 - theta * source_norm);
        max_norm = max_norm.max(op.norm(&next));
        states.push(next);
    }
    Ok(LinearSolution {
        states,
        continuity: ContinuityCheck { max_norm, bound },
    })
}

/// Integrates `u' = Π[(Ã + P) u + f]` from `u0` with the implicit midpoint rule.
pub fn linear_solve(op: &DiscreteOperator, u0: &[f64], forcing: &[Vec<f64>], time: &TimeGrid) -> Result<LinearSolution> {
    linear_solve_with(op, &Generator::linear(), u0, forcing, time)
}

/// [`linear_solve`] with an explicit choice of generator.
pub fn linear_solve_with(
    op: &DiscreteOperator,
    gen: &Generator,
    u0: &[f64],
    forcing: &[Vec<f64>],
    time: &TimeGrid,
) -> Result<LinearSolution> {
    if forcing.len() != time.steps + 1 {
        return Err(GasnetError::ShapeMismatch {
            expected: time.steps + 1,
            got: forcing.len(),
        });
    }
    let solver = op.implicit_solver(0.5 * time.tau(), gen)?;
    let source_norm = if gen.source { op.source_norm() } else { 0.0 };
    propagate(op, &solver, source_norm, u0, forcing, time.tau())
}

/// Per-time-step diagnostics of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub kirchhoff_max: f64,
    pub continuity_max: f64,
    /// `r − c₁κ_U − ‖v(t) − v_e‖_∞`.
    pub rball_dist: f64,
    pub box_margin: f64,
}

/// Converged forward solution with solver diagnostics.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Time grid actually covered (shorter than requested if truncated).
    pub time: TimeGrid,
    pub requested_horizon: f64,
    /// `v(t_j)` for `j = 0..=M`.
    pub states: Vec<Vec<f64>>,
    pub picard_iters: usize,
    /// Contraction ratios `δ_k`.
    pub ratios: Vec<f64>,
    /// Update norms `‖v_{k+1} − v_k‖`.
    pub updates: Vec<f64>,
    /// Set when the ball condition forced a shorter horizon.
    pub truncated: bool,
    pub continuity: ContinuityCheck,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn max_kirchhoff(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.kirchhoff_max))
    }

    pub fn max_continuity(&self) -> f64 {
        self.diagnostics.iter().fold(0.0, |m, d| m.max(d.continuity_max))
    }

    /// `max_{j,x} |v(t_j, x) − reference(x)|`.
    pub fn max_deviation(&self, reference: &[f64]) -> f64 {
        self.states
            .iter()
            .flat_map(|s| s.iter().zip(reference).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

/// Kirchhoff residual `Σ_k ξ_k(v) D_k² q^k(v)` at every inner vertex.
pub fn kirchhoff_residual(op: &DiscreteOperator, state: &[f64]) -> Vec<f64> {
    op.junctions
        .iter()
        .map(|j| {
            j.ends
                .iter()
                .map(|e| e.xi as f64 * op.diameter_sq[e.pipe] * state[op.grid.q(e.pipe, e.node)])
                .sum()
        })
        .collect()
}

/// Largest pressure gap between pipe ends at every inner vertex.
pub fn pressure_continuity_residual(op: &DiscreteOperator, state: &[f64]) -> Vec<f64> {
    op.junctions
        .iter()
        .map(|j| {
            let ps = j.ends.iter().map(|e| state[op.grid.p(e.pipe, e.node)]);
            let (lo, hi) = ps.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)));
            hi - lo
        })
        .collect()
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Lifted data, forcing and the shifted initial state of a control.
pub(crate) struct ControlData {
    pub lift: Vec<Vec<f64>>,
    pub forcing: Vec<Vec<f64>>,
}

pub(crate) fn control_data(op: &DiscreteOperator, phi: &ControlSignal) -> Result<ControlData> {
    if phi.num_slots() != op.num_slots() {
        return Err(GasnetError::ShapeMismatch {
            expected: op.num_slots(),
            got: phi.num_slots(),
        });
    }
    let dphi = phi.derivative();
    let mut lift = Vec::with_capacity(phi.values.len());
    let mut forcing = Vec::with_capacity(phi.values.len());
    for (v, d) in phi.values.iter().zip(&dphi) {
        lift.push(op.lift_boundary(v)?);
        forcing.push(op.boundary_forcing(v, d)?);
    }
    Ok(ControlData { lift, forcing })
}

/// Solves the semilinear system for the control `phi` by Picard iteration,
/// each sweep being one implicit midpoint solve with the friction frozen at
/// the previous iterate.
pub fn picard_solve(ctx: &ForwardContext, phi: &ControlSignal, opts: &PicardOptions) -> Result<Trajectory> {
    let op = ctx.op;
    let time = phi.time;
    let tau = time.tau();
    let n = op.len();
    let data = control_data(op, phi)?;
    let u0: Vec<f64> = ctx.v_e.iter().zip(&data.lift[0]).map(|(a, b)| a - b).collect();
    let cres = max_abs(&op.constraint_values(&u0));
    if cres > 1e-12 * max_abs(ctx.v_e).max(1.0) {
        return Err(GasnetError::Control(format!(
            "control does not match the equilibrium at t = 0 (boundary mismatch {cres})"
        )));
    }
    let solver = op.implicit_solver(0.5 * tau, &Generator::linear())?;
    let source_norm = op.source_norm();
    let tube = ctx.tube();

    let mut steps = time.steps;
    let mut truncated = false;
    let mut iterate: Vec<Vec<f64>> = vec![ctx.v_e.to_vec(); steps + 1];
    let mut ratios = Vec::new();
    let mut updates: Vec<f64> = Vec::new();
    let mut non_contracting = 0;
    let mut continuity = ContinuityCheck {
        max_norm: 0.0,
        bound: 0.0,
    };
    let mut converged = false;
    let mut iters = 0;
    while iters < opts.max_iters {
        iters += 1;
        if steps == 0 {
            converged = true;
            break;
        }
        let mut forcing = Vec::with_capacity(steps + 1);
        for j in 0..=steps {
            let mut g = op.nonlinearity(&iterate[j])?;
            for (gi, fi) in g.iter_mut().zip(&data.forcing[j]) {
                *gi += fi;
            }
            forcing.push(g);
        }
        let sol = propagate(op, &solver, source_norm, &u0, &forcing, tau)?;
        continuity = sol.continuity;
        let mut next: Vec<Vec<f64>> = sol
            .states
            .into_iter()
            .zip(&data.lift)
            .map(|(u, l)| u.iter().zip(l).map(|(a, b)| a + b).collect())
            .collect();
        if let Some(j) = next.iter().position(|v| sup_distance(v, ctx.v_e) >= tube) {
            truncated = true;
            steps = j - 1;
            next.truncate(steps + 1);
            iterate.truncate(steps + 1);
        }
        let delta = next
            .iter()
            .zip(&iterate)
            .map(|(a, b)| {
                let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                op.norm(&d)
            })
            .fold(0.0, f64::max);
        if let Some(&prev) = updates.last() {
            let ratio = if prev > 0.0 { delta / prev } else { 0.0 };
            ratios.push(ratio);
            non_contracting = if ratio >= 1.0 { non_contracting + 1 } else { 0 };
            if non_contracting >= 3 {
                return Err(GasnetError::ContractionFailure(ratios));
            }
        }
        updates.push(delta);
        iterate = next;
        if delta <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GasnetError::PicardNotConverged {
            iters,
            last: updates.last().copied().unwrap_or(f64::NAN),
        });
    }

    let diagnostics = iterate
        .iter()
        .enumerate()
        .map(|(j, v)| StepDiagnostics {
            t: time.t(j),
            kirchhoff_max: max_abs(&kirchhoff_residual(op, v)),
            continuity_max: max_abs(&pressure_continuity_residual(op, v)),
            rball_dist: tube - sup_distance(v, ctx.v_e),
            box_margin: ctx.bounds.margin(v),
        })
        .collect();
    debug_assert!(iterate.iter().all(|v| v.len() == n));
    Ok(Trajectory {
        time: time.truncated(steps),
        requested_horizon: time.horizon,
        states: iterate,
        picard_iters: iters,
        ratios,
        updates,
        truncated,
        continuity,
        diagnostics,
    })
}

/// Box face hit by an active point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Lower,
    Upper,
}

/// A state entry within `tol_active` of (or beyond) a box face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActivePoint {
    pub step: usize,
    /// State-vector index.
    pub index: usize,
    pub face: Face,
    /// Signed distance to the face, negative when violated.
    pub margin: f64,
}

/// Output of [`constraint_monitor`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    /// Smallest margin per time step.
    pub step_margins: Vec<f64>,
    pub worst_margin: f64,
    pub feasible: bool,
    pub active: Vec<ActivePoint>,
}

/// Signed distances of every state sample to the box faces; points within
/// `tol_active · (face width)` of a face form the active set.
pub fn constraint_monitor(states: &[Vec<f64>], bounds: &BoxBounds, tol_active: f64) -> MarginReport {
    let mut active = Vec::new();
    let mut step_margins = Vec::with_capacity(states.len());
    for (step, v) in states.iter().enumerate() {
        let mut worst = f64::INFINITY;
        for (index, &x) in v.iter().enumerate() {
            let (lo, hi) = (bounds.lower[index], bounds.upper[index]);
            let tol = tol_active * (hi - lo);
            let (ml, mu) = (x - lo, hi - x);
            worst = worst.min(ml.min(mu));
            if ml <= tol {
                active.push(ActivePoint { step, index, face: Face::Lower, margin: ml });
            } else if mu <= tol {
                active.push(ActivePoint { step, index, face: Face::Upper, margin: mu });
            }
        }
        step_margins.push(worst);
    }
    let worst_margin = step_margins.iter().copied().fold(f64::INFINITY, f64::min);
    MarginReport {
        step_margins,
        worst_margin,
        feasible: worst_margin >= 0.0,
        active,
    }
}
