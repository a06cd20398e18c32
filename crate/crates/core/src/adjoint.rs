//! Linearized (sensitivity) and discrete adjoint solves.
//!
//! The adjoint recursion is the exact transpose, in the weighted inner
//! product, of the linearized implicit midpoint steps, so the Green identity
//! holds to rounding.

use serde::Serialize;

use crate::control::ControlSignal;
use crate::discrete::{DiscreteOperator, Generator, NodeJacobian};
use crate::error::{GasnetError, Result};
use crate::forward::{control_data, Trajectory};

/// Friction Jacobians along a converged base trajectory.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub jacobians: Vec<NodeJacobian>,
}

impl Linearization {
    pub fn new(op: &DiscreteOperator, base: &Trajectory) -> Result<Self> {
        Ok(Self {
            jacobians: base.states.iter().map(|v| op.jacobian(v)).collect::<Result<_>>()?,
        })
    }
}

/// Solution `w` of the linearized system for a direction `h`.
#[derive(Clone, Debug)]
pub struct SensitivityTrajectory {
    pub w: Vec<Vec<f64>>,
    pub direction: ControlSignal,
    /// Inhomogeneity `r^j = 𝔹h^j + 𝔉^j 𝔹₁h^j`.
    pub source: Vec<Vec<f64>>,
    lift: Vec<Vec<f64>>,
}

impl SensitivityTrajectory {
    /// State derivative `S'(Φ) h = w + 𝔹₁ h`.
    pub fn state_derivative(&self) -> Vec<Vec<f64>> {
        self.w
            .iter()
            .zip(&self.lift)
            .map(|(w, l)| w.iter().zip(l).map(|(a, b)| a + b).collect())
            .collect()
    }
}

/// Backward adjoint states `𝐩(t_j)` with `𝐩(T) = 0`.
#[derive(Clone, Debug)]
pub struct AdjointTrajectory {
    pub p: Vec<Vec<f64>>,
    /// Time-quadrature weights `μ^j` of the adjoint pairing.
    pub mu: Vec<Vec<f64>>,
    /// `‖𝐩(t_j)‖_M`.
    pub norms: Vec<f64>,
}

fn check_direction(base: &Trajectory, h: &ControlSignal) -> Result<()> {
    if h.values.len() != base.states.len() {
        return Err(GasnetError::ShapeMismatch {
            expected: base.states.len(),
            got: h.values.len(),
        });
    }
    if h.values[0].iter().any(|&v| v != 0.0) {
        return Err(GasnetError::Control("direction must vanish at t = 0".into()));
    }
    Ok(())
}

/// Integrates the linearized system around `base` in direction `h`.
pub fn linearized_solve(
    op: &DiscreteOperator,
    base: &Trajectory,
    lin: &Linearization,
    h: &ControlSignal,
) -> Result<SensitivityTrajectory> {
    check_direction(base, h)?;
    let data = control_data(op, h)?;
    let n = op.len();
    let m = base.time.steps;
    let theta = 0.5 * base.time.tau();
    let mut source = Vec::with_capacity(m + 1);
    let mut tmp = vec![0.0; n];
    for j in 0..=m {
        op.apply_jacobian(&lin.jacobians[j], &data.lift[j], &mut tmp);
        source.push(data.forcing[j].iter().zip(&tmp).map(|(a, b)| a + b).collect::<Vec<f64>>());
    }
    let mut w = Vec::with_capacity(m + 1);
    w.push(vec![0.0; n]);
    let mut kw = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for step in 0..m {
        op.apply_generator(&Generator::with_jacobian(&lin.jacobians[step]), &w[step], &mut kw);
        for i in 0..n {
            rhs[i] = w[step][i] + theta * (kw[i] + source[step][i] + source[step + 1][i]);
        }
        let solver = op.implicit_solver(theta, &Generator::with_jacobian(&lin.jacobians[step + 1]))?;
        let next = solver.solve(&rhs);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GasnetError::SolverBreakdown {
                step: step + 1,
                reason: "non-finite sensitivity".into(),
            });
        }
        w.push(next);
    }
    Ok(SensitivityTrajectory {
        w,
        direction: h.clone(),
        source,
        lift: data.lift,
    })
}

/// Solves the discrete adjoint backward from `𝐩(T) = 0` with data `misfit`
/// (the derivative of the running cost with respect to the state).
pub fn adjoint_solve(
    op: &DiscreteOperator,
    base: &Trajectory,
    lin: &Linearization,
    misfit: &[Vec<f64>],
) -> Result<AdjointTrajectory> {
    let m = base.time.steps;
    if misfit.len() != m + 1 {
        return Err(GasnetError::ShapeMismatch {
            expected: m + 1,
            got: misfit.len(),
        });
    }
    let n = op.len();
    let theta = 0.5 * base.time.tau();
    let weights = base.time.weights();
    let mut p = vec![vec![0.0; n]; m + 1];
    let mut kp = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for j in (1..=m).rev() {
        let gen = Generator::with_jacobian(&lin.jacobians[j]).adjoint();
        op.apply_generator(&gen, &p[j], &mut kp);
        for i in 0..n {
            rhs[i] = p[j][i] + theta * kp[i] + weights[j] * misfit[j][i];
        }
        let solver = op.implicit_solver(theta, &gen)?;
        let prev = solver.solve(&rhs);
        if prev.iter().any(|v| !v.is_finite()) {
            return Err(GasnetError::SolverBreakdown {
                step: j,
                reason: "non-finite adjoint".into(),
            });
        }
        p[j - 1] = prev;
    }
    let mu = quadrature(&p, theta, TimePairing::Consistent);
    let norms = p.iter().map(|v| op.norm(v)).collect();
    Ok(AdjointTrajectory { p, mu, norms })
}

/// Time pairing used to weight the adjoint states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimePairing {
    /// The transpose of the midpoint steps.
    Consistent,
    /// Rectangle weights; breaks exact transposition (negative control).
    Mismatched,
}

fn quadrature(p: &[Vec<f64>], theta: f64, pairing: TimePairing) -> Vec<Vec<f64>> {
    let m = p.len() - 1;
    (0..=m)
        .map(|j| match pairing {
            TimePairing::Consistent if j == 0 => p[0].iter().map(|v| theta * v).collect(),
            TimePairing::Consistent => p[j - 1].iter().zip(&p[j]).map(|(a, b)| theta * (a + b)).collect(),
            TimePairing::Mismatched => p[j].iter().map(|v| 2.0 * theta * v).collect(),
        })
        .collect()
}

/// Both sides of the discrete Green identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreenResidual {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(|lhs|, |rhs|)`, or the absolute gap if both vanish.
    pub relative: f64,
}

/// Evaluates `Σ(𝔉□μ + ω e, w)_M` against `Σ(μ, 𝔉w + r)_M`.
pub fn green_identity_residual(
    op: &DiscreteOperator,
    base: &Trajectory,
    lin: &Linearization,
    h: &ControlSignal,
    misfit: &[Vec<f64>],
    pairing: TimePairing,
) -> Result<GreenResidual> {
    let sens = linearized_solve(op, base, lin, h)?;
    let adj = adjoint_solve(op, base, lin, misfit)?;
    let mu = quadrature(&adj.p, 0.5 * base.time.tau(), pairing);
    let weights = base.time.weights();
    let n = op.len();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let mut tmp = vec![0.0; n];
    for j in 0..mu.len() {
        let jac = &lin.jacobians[j];
        op.apply_jacobian_adjoint(jac, &mu[j], &mut tmp);
        for (t, e) in tmp.iter_mut().zip(&misfit[j]) {
            *t += weights[j] * e;
        }
        lhs += op.inner(&tmp, &sens.w[j]);
        op.apply_jacobian(jac, &sens.w[j], &mut tmp);
        for (t, r) in tmp.iter_mut().zip(&sens.source[j]) {
            *t += r;
        }
        rhs += op.inner(&mu[j], &tmp);
    }
    let scale = lhs.abs().max(rhs.abs());
    let relative = if scale > 0.0 { (lhs - rhs).abs() / scale } else { (lhs - rhs).abs() };
    Ok(GreenResidual { lhs, rhs, relative })
}
