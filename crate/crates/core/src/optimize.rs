//! Tracking cost, its Riesz gradient in the discrete H² control space, and a
//! projected gradient method with quadratic state-constraint penalties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_solve, Linearization};
use crate::control::{ControlSignal, H2Gram};
use crate::error::{GasnetError, Result};
use crate::forward::{constraint_monitor, BoxBounds, Face, Trajectory};
use crate::scenario::Model;

/// Target trajectory `v_d`: one state per time step, or a single state
/// broadcast over the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub states: Vec<Vec<f64>>,
}

impl Target {
    pub fn constant(state: Vec<f64>) -> Self {
        Self { states: vec![state] }
    }

    pub fn at(&self, j: usize) -> &[f64] {
        if self.states.len() == 1 {
            &self.states[0]
        } else {
            &self.states[j]
        }
    }
}

/// Projected-gradient settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Threshold on the H² norm of the projected gradient step.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_armijo")]
    pub armijo_c: f64,
    /// Halvings allowed per line search.
    #[serde(default = "default_backtracks")]
    pub max_backtracks: usize,
    /// Polak–Ribière directions with an interpolating line search; plain
    /// projected gradient with Barzilai–Borwein steps otherwise.
    #[serde(default = "default_conjugate")]
    pub conjugate: bool,
}

fn default_max_iters() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-6
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_backtracks() -> usize {
    40
}
fn default_conjugate() -> bool {
    true
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol: default_tol(),
            armijo_c: default_armijo(),
            max_backtracks: default_backtracks(),
            conjugate: default_conjugate(),
        }
    }
}

/// Escalation schedule of the penalty weight `ρ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySchedule {
    #[serde(default = "default_rho0")]
    pub rho0: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
}

fn default_rho0() -> f64 {
    1.0
}
fn default_factor() -> f64 {
    10.0
}
fn default_rho_max() -> f64 {
    1e6
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        Self {
            rho0: default_rho0(),
            factor: default_factor(),
            rho_max: default_rho_max(),
        }
    }
}

/// Cost functional settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub target: Target,
    /// Tikhonov weight on the reduced control.
    pub sigma: f64,
    pub optimizer: OptimizerSettings,
    pub penalty: PenaltySchedule,
    /// Active-set tolerance relative to the face width.
    pub tol_active: f64,
    /// Directions sampled by [`kkt_residual`].
    pub kkt_samples: usize,
    pub seed: u64,
}

impl CostConfig {
    pub fn new(target: Target) -> Self {
        Self {
            target,
            sigma: 1e-3,
            optimizer: OptimizerSettings::default(),
            penalty: PenaltySchedule::default(),
            tol_active: 1e-6,
            kkt_samples: 100,
            seed: 0,
        }
    }
}

/// Penalized objective: state-constraint set and penalty weight.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub bounds: &'a BoxBounds,
    pub rho: f64,
}

/// Cost terms at one control.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub tracking: f64,
    pub regularization: f64,
    pub penalty: f64,
    pub trajectory: Trajectory,
}

impl Evaluation {
    /// `J` without the penalty.
    pub fn cost(&self) -> f64 {
        self.tracking + self.regularization
    }

    /// Penalized objective `J + ρ/2 Σ ω ‖viol‖²`.
    pub fn total(&self) -> f64 {
        self.tracking + self.regularization + self.penalty
    }
}

/// Forward solve and cost terms for a reduced control `h = Φ − Φ^e`.
pub fn evaluate(model: &Model, h: &ControlSignal, obj: &Objective) -> Result<Evaluation> {
    let phi = ControlSignal::from_reduced(&model.phi_e, h);
    let trajectory = model.solve(&phi)?;
    if trajectory.truncated {
        return Err(GasnetError::HorizonLimited {
            achieved: trajectory.time.horizon,
        });
    }
    let weights = trajectory.time.weights();
    let op = &model.op;
    let (mut tracking, mut penalty) = (0.0, 0.0);
    for (j, v) in trajectory.states.iter().enumerate() {
        let d: Vec<f64> = v.iter().zip(model.cost.target.at(j)).map(|(a, b)| a - b).collect();
        tracking += 0.5 * weights[j] * op.inner(&d, &d);
        if obj.rho > 0.0 {
            let viol = obj.bounds.violation(v);
            penalty += 0.5 * obj.rho * weights[j] * op.inner(&viol, &viol);
        }
    }
    let regularization = 0.5 * model.cost.sigma * model.gram.inner(h, h);
    Ok(Evaluation {
        tracking,
        regularization,
        penalty,
        trajectory,
    })
}

/// `J(Φ)` for a full control `Φ` (without penalty).
pub fn cost(model: &Model, phi: &ControlSignal) -> Result<f64> {
    let h = phi.reduced(&model.phi_e);
    let obj = Objective {
        bounds: &model.constraint_bounds,
        rho: 0.0,
    };
    Ok(evaluate(model, &h, &obj)?.cost())
}

/// State derivative of the running cost: `v − v_d + ρ viol`.
pub fn misfit(model: &Model, trajectory: &Trajectory, obj: &Objective) -> Vec<Vec<f64>> {
    trajectory
        .states
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let viol = obj.bounds.violation(v);
            v.iter()
                .zip(model.cost.target.at(j))
                .zip(&viol)
                .map(|((a, b), c)| a - b + obj.rho * c)
                .collect()
        })
        .collect()
}

/// Gradient pieces: the L² pairing data `b` and the Riesz representer.
#[derive(Clone, Debug)]
pub struct Gradient {
    /// `b^j_s`, the derivative of the running cost against unit samples.
    pub raw: ControlSignal,
    /// H²-Riesz representer of the full derivative (including `σ h`).
    pub riesz: ControlSignal,
}

/// Adjoint gradient of the penalized objective at `h`.
pub fn gradient(model: &Model, h: &ControlSignal, obj: &Objective, eval: &Evaluation) -> Result<Gradient> {
    let op = &model.op;
    let traj = &eval.trajectory;
    let lin = Linearization::new(op, traj)?;
    let e = misfit(model, traj, obj);
    let adj = adjoint_solve(op, traj, &lin, &e)?;
    let time = traj.time;
    let weights = time.weights();
    let m = time.steps;
    let n = op.len();
    let slots = op.num_slots();

    let mut raw = h.zeros_like();
    let mut unit = vec![0.0; slots];
    let mut lift = vec![0.0; n];
    let mut b0 = vec![0.0; n];
    let mut plift = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let adj_f: Vec<Vec<f64>> = (0..=m)
        .map(|j| {
            let mut out = vec![0.0; n];
            op.apply_jacobian_adjoint(&lin.jacobians[j], &adj.mu[j], &mut out);
            out
        })
        .collect();
    for s in (0..slots).filter(|&s| op.active_slots[s]) {
        unit.iter_mut().for_each(|u| *u = 0.0);
        unit[s] = 1.0;
        op.lift_into(&unit, &mut lift);
        op.b0_into(&unit, &mut b0);
        op.apply_source(&lift, &mut plift);
        for ((t, a), b) in tmp.iter_mut().zip(&b0).zip(&plift) {
            *t = a + b;
        }
        let mut d = vec![0.0; m + 1];
        for j in 0..=m {
            let c = op.inner(&adj.mu[j], &tmp) + op.inner(&adj_f[j], &lift) + weights[j] * op.inner(&e[j], &lift);
            raw.values[j][s] += c;
            d[j] = -op.inner(&adj.mu[j], &lift);
        }
        for (j, dj) in d.iter().enumerate() {
            for (i, w) in time.derivative_stencil(j) {
                raw.values[i][s] += w * dj;
            }
        }
    }
    for v in &mut raw.values[0] {
        *v = 0.0;
    }
    let riesz = model.gram.riesz(&raw).axpy(model.cost.sigma, h);
    Ok(Gradient { raw, riesz })
}

/// Riesz gradient `J'(Φ)` (no penalty) as an element of the reduced control space.
pub fn riesz_gradient(model: &Model, phi: &ControlSignal) -> Result<ControlSignal> {
    let h = phi.reduced(&model.phi_e);
    let obj = Objective {
        bounds: &model.constraint_bounds,
        rho: 0.0,
    };
    let eval = evaluate(model, &h, &obj)?;
    Ok(gradient(model, &h, &obj, &eval)?.riesz)
}

/// Radial scaling into the H² ball of radius `η` and the sup ball of radius `κ_U`.
pub fn project_feasible(h: &ControlSignal, gram: &H2Gram, eta: f64, kappa_u: f64) -> Result<ControlSignal> {
    let s = feasible_scale(h, gram, eta, kappa_u)?;
    Ok(if s < 1.0 { h.scaled(s) } else { h.clone() })
}

/// Factor `min(1, η/‖h‖_{H²}, κ_U/‖h‖_∞)` used by [`project_feasible`].
pub fn feasible_scale(h: &ControlSignal, gram: &H2Gram, eta: f64, kappa_u: f64) -> Result<f64> {
    if h.values[0].iter().any(|&v| v != 0.0) {
        return Err(GasnetError::Control("reduced control must vanish at t = 0".into()));
    }
    // slack so that a scaled point is a fixed point despite rounding in the norm
    const SLACK: f64 = 1.0 + 1e-12;
    let (hn, sn) = (gram.norm(h), h.sup_norm());
    let mut s = 1.0f64;
    if hn > eta * SLACK {
        s = s.min(eta / hn);
    }
    if sn > kappa_u * SLACK {
        s = s.min(kappa_u / sn);
    }
    Ok(s)
}

/// One accepted (or initial) iterate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub rho: f64,
    pub cost: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub box_margin: f64,
    pub picard_iters: usize,
}

/// Multiplier weight at an active point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Multiplier {
    pub step: usize,
    pub index: usize,
    pub face: Face,
    pub value: f64,
}

/// First-order optimality summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KktReport {
    /// H² norm of the projected gradient of the penalized objective.
    pub gradient_norm: f64,
    pub multipliers: Vec<Multiplier>,
    /// `Σ ω m λ |margin|` over the multipliers.
    pub complementarity: f64,
    pub zeta: f64,
    /// Most negative directional derivative over sampled feasible directions.
    pub variational_residual: f64,
    pub max_violation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    IterationLimit,
    LineSearchFailed,
    HorizonLimited,
    /// Stationary at the largest penalty weight with a residual box violation.
    PenaltyLimited,
}

/// Outcome of [`optimize`].
#[derive(Clone, Debug, Serialize)]
pub struct OptimizationReport {
    pub status: Status,
    pub iterations: usize,
    pub history: Vec<IterationRecord>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_objective: f64,
    pub rho: f64,
    pub kkt: KktReport,
    pub delta: Option<f64>,
    #[serde(skip)]
    pub control: ControlSignal,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

fn projected_step(model: &Model, h: &ControlSignal, g: &ControlSignal) -> Result<ControlSignal> {
    let trial = project_feasible(&h.axpy(-1.0, g), &model.gram, model.control_bounds.eta, model.control_bounds.kappa_u)?;
    Ok(trial.axpy(-1.0, h))
}

fn max_relative_violation(bounds: &BoxBounds, states: &[Vec<f64>]) -> f64 {
    states
        .iter()
        .flat_map(|v| {
            bounds
                .violation(v)
                .into_iter()
                .enumerate()
                .map(|(i, x)| x.abs() / (bounds.upper[i] - bounds.lower[i]))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Projected nonlinear conjugate gradients with Armijo backtracking and an escalating
/// quadratic penalty for the state box `bounds`.
pub fn optimize(model: &Model, bounds: &BoxBounds) -> Result<OptimizationReport> {
    optimize_from(model, bounds, &ControlSignal::constant(model.time, &vec![0.0; model.op.num_slots()]))
}

/// [`optimize`] starting from the reduced control `start`.
pub fn optimize_from(model: &Model, bounds: &BoxBounds, start: &ControlSignal) -> Result<OptimizationReport> {
    let settings = model.cost.optimizer;
    let schedule = model.cost.penalty;
    let cb = model.control_bounds;
    let project = |x: &ControlSignal| project_feasible(x, &model.gram, cb.eta, cb.kappa_u);
    let mut h = project(start)?;
    let mut rho = schedule.rho0;
    let mut obj = Objective { bounds, rho };
    let mut eval = evaluate(model, &h, &obj)?;
    let initial_cost = eval.cost();
    let mut grad = gradient(model, &h, &obj, &eval)?;
    let record = |iter: usize, rho: f64, e: &Evaluation, g: &Gradient, step: f64| IterationRecord {
        iter,
        rho,
        cost: e.cost(),
        objective: e.total(),
        grad_norm: model.gram.norm(&g.riesz),
        step,
        box_margin: bounds_margin(bounds, &e.trajectory),
        picard_iters: e.trajectory.picard_iters,
    };
    let mut history = vec![record(0, rho, &eval, &grad, 0.0)];
    let mut iterations = 0;
    let mut status;
    loop {
        let mut direction = grad.riesz.scaled(-1.0);
        let mut alpha = 1.0;
        loop {
            let pg = projected_step(model, &h, &grad.riesz)?;
            if model.gram.norm(&pg) <= settings.tol {
                status = Status::Converged;
                break;
            }
            if iterations >= settings.max_iters {
                status = Status::IterationLimit;
                break;
            }
            let mut slope0 = model.gram.inner(&grad.riesz, &direction);
            if !(slope0 < 0.0) {
                direction = grad.riesz.scaled(-1.0);
                slope0 = model.gram.inner(&grad.riesz, &direction);
            }
            let f0 = eval.total();
            let mut search = LineSearch::default();
            let trial_at = |a: f64, search: &mut LineSearch| -> Result<()> {
                let raw = h.axpy(a, &direction);
                let scale = feasible_scale(&raw, &model.gram, cb.eta, cb.kappa_u)?;
                let exact = scale >= 1.0;
                let trial = if exact { raw } else { raw.scaled(scale) };
                let slope = if exact { a * slope0 } else { model.gram.inner(&grad.riesz, &trial.axpy(-1.0, &h)) };
                match evaluate(model, &trial, &obj) {
                    Ok(e) => {
                        let f = e.total();
                        search.last = Some((a, f, exact));
                        let better = search.best.as_ref().is_none_or(|b| f < b.2.total());
                        if slope < 0.0 && f <= f0 + settings.armijo_c * slope && better {
                            search.best = Some((trial, a, e, exact));
                        }
                    }
                    Err(GasnetError::HorizonLimited { .. })
                    | Err(GasnetError::ContractionFailure(_))
                    | Err(GasnetError::PicardNotConverged { .. }) => {
                        search.horizon_hit = true;
                        search.last = None;
                    }
                    Err(e) => return Err(e),
                }
                Ok(())
            };
            let mut a = alpha;
            for _ in 0..=settings.max_backtracks {
                trial_at(a, &mut search)?;
                // quadratic model along an unprojected ray
                if settings.conjugate {
                    if let Some((a1, f1, true)) = search.last {
                        let curv = 2.0 * (f1 - f0 - slope0 * a1) / (a1 * a1);
                        if curv > 0.0 {
                            let aq = -slope0 / curv;
                            if (aq - a1).abs() > 1e-3 * a1 {
                                trial_at(aq, &mut search)?;
                            }
                        }
                    }
                }
                if search.best.is_some() {
                    break;
                }
                a *= 0.5;
            }
            let Some((trial, a, e, exact)) = search.best else {
                status = if search.horizon_hit { Status::HorizonLimited } else { Status::LineSearchFailed };
                break;
            };
            let new_grad = gradient(model, &trial, &obj, &e)?;
            let s = trial.axpy(-1.0, &h);
            if settings.conjugate {
                let y = new_grad.riesz.axpy(-1.0, &grad.riesz);
                let gg = model.gram.inner(&grad.riesz, &grad.riesz);
                let beta = (model.gram.inner(&new_grad.riesz, &y) / gg).max(0.0);
                direction = if !exact {
                    new_grad.riesz.scaled(-1.0)
                } else {
                    new_grad.riesz.scaled(-1.0).axpy(beta, &direction)
                };
                let slope_new = model.gram.inner(&new_grad.riesz, &direction);
                alpha = if slope_new < 0.0 { a * slope0 / slope_new } else { 1.0 };
            } else {
                let y = new_grad.riesz.axpy(-1.0, &grad.riesz);
                let sy = model.gram.inner(&s, &y);
                alpha = if sy > 0.0 { model.gram.inner(&s, &s) / sy } else { 2.0 * a };
                direction = new_grad.riesz.scaled(-1.0);
            }
            iterations += 1;
            h = trial;
            eval = e;
            grad = new_grad;
            history.push(record(iterations, rho, &eval, &grad, a));
        }
        let violation = max_relative_violation(bounds, &eval.trajectory.states);
        if violation <= model.cost.tol_active || status != Status::Converged {
            break;
        }
        if rho * schedule.factor > schedule.rho_max * (1.0 + 1e-12) {
            status = Status::PenaltyLimited;
            break;
        }
        rho *= schedule.factor;
        obj = Objective { bounds, rho };
        eval = evaluate(model, &h, &obj)?;
        grad = gradient(model, &h, &obj, &eval)?;
    }
    let kkt = kkt_report(model, &h, &obj, &eval, &grad)?;
    Ok(OptimizationReport {
        status,
        iterations,
        history,
        initial_cost,
        final_cost: eval.cost(),
        final_objective: eval.total(),
        rho,
        kkt,
        delta: None,
        control: ControlSignal::from_reduced(&model.phi_e, &h),
        trajectory: eval.trajectory,
    })
}

/// Trial bookkeeping of one line search.
#[derive(Default)]
struct LineSearch {
    /// Best Armijo-acceptable point: control, step, evaluation, and whether
    /// the projection was inactive.
    best: Option<(ControlSignal, f64, Evaluation, bool)>,
    /// Last evaluated step, objective, and whether the projection was inactive.
    last: Option<(f64, f64, bool)>,
    horizon_hit: bool,
}

fn bounds_margin(bounds: &BoxBounds, traj: &Trajectory) -> f64 {
    traj.states.iter().map(|v| bounds.margin(v)).fold(f64::INFINITY, f64::min)
}

fn kkt_report(
    model: &Model,
    h: &ControlSignal,
    obj: &Objective,
    eval: &Evaluation,
    grad: &Gradient,
) -> Result<KktReport> {
    let traj = &eval.trajectory;
    let weights = traj.time.weights();
    let monitor = constraint_monitor(&traj.states, obj.bounds, model.cost.tol_active);
    let mut multipliers = Vec::new();
    let mut complementarity = 0.0;
    for a in &monitor.active {
        let value = if a.margin < 0.0 { obj.rho * -a.margin } else { 0.0 };
        complementarity += weights[a.step] * model.op.mass[a.index] * value * a.margin.abs();
        multipliers.push(Multiplier {
            step: a.step,
            index: a.index,
            face: a.face,
            value,
        });
    }
    let pg = projected_step(model, h, &grad.riesz)?;
    Ok(KktReport {
        gradient_norm: model.gram.norm(&pg),
        multipliers,
        complementarity,
        zeta: 1.0,
        variational_residual: variational_residual(model, h, &grad.riesz),
        max_violation: max_relative_violation(obj.bounds, &traj.states),
    })
}

/// Smooth random reduced control on the active slots, inside the control balls.
pub fn random_feasible(model: &Model, rng: &mut ChaCha8Rng) -> ControlSignal {
    let time = model.time;
    let mut h = ControlSignal::constant(time, &vec![0.0; model.op.num_slots()]);
    for s in (0..model.op.num_slots()).filter(|&s| model.op.active_slots[s]) {
        let coeffs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for j in 0..=time.steps {
            let t = time.t(j) / time.horizon;
            h.values[j][s] = coeffs
                .iter()
                .enumerate()
                .map(|(f, c)| c * (std::f64::consts::PI * (f + 1) as f64 * t / 2.0).sin().powi(2))
                .sum();
        }
    }
    let b = model.control_bounds;
    let full = project_feasible(&h.scaled(1e6), &model.gram, b.eta, b.kappa_u).expect("h(0) = 0");
    full.scaled(rng.gen_range(0.0..1.0))
}

fn variational_residual(model: &Model, h: &ControlSignal, g: &ControlSignal) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(model.cost.seed);
    let samples: Vec<ControlSignal> = (0..model.cost.kkt_samples).map(|_| random_feasible(model, &mut rng)).collect();
    samples
        .par_iter()
        .map(|c| model.gram.inner(g, &c.axpy(-1.0, h)))
        .reduce(|| 0.0, f64::min)
}

/// Discrete variational-inequality residual at `phi_star` for the penalized
/// objective with weight `rho` (0 means first-order stationary).
pub fn kkt_residual(model: &Model, phi_star: &ControlSignal, bounds: &BoxBounds, rho: f64) -> Result<f64> {
    let h = phi_star.reduced(&model.phi_e);
    let obj = Objective { bounds, rho };
    let eval = evaluate(model, &h, &obj)?;
    let grad = gradient(model, &h, &obj, &eval)?;
    Ok(variational_residual(model, &h, &grad.riesz))
}

/// Runs [`optimize`] on the shrunk constraint sets `(1 − δ) v_e + δ K`.
pub fn delta_homotopy(model: &Model, deltas: &[f64]) -> Vec<Result<OptimizationReport>> {
    deltas
        .iter()
        .map(|&delta| {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(GasnetError::Precondition(format!("delta must be positive, got {delta}")));
            }
            let bounds = model.constraint_bounds.shrink(&model.v_e, delta);
            optimize(model, &bounds).map(|mut r| {
                r.delta = Some(delta);
                r
            })
        })
        .collect()
}
