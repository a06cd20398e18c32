//! Time-sampled boundary controls, their time derivative and the discrete
//! H² geometry of the reduced control space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{GasnetError, Result};

/// Uniform time grid `t_j = j τ`, `j = 0..=M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GasnetError::Control(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(GasnetError::Control("at least two time steps are required".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn tau(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.horizon * j as f64 / self.steps as f64
    }

    /// Trapezoid weights `ω_j`.
    pub fn weights(&self) -> Vec<f64> {
        let tau = self.tau();
        (0..=self.steps)
            .map(|j| if j == 0 || j == self.steps { 0.5 * tau } else { tau })
            .collect()
    }

    /// Row `j` of the second-order time-derivative stencil.
    pub fn derivative_stencil(&self, j: usize) -> [(usize, f64); 3] {
        let m = self.steps;
        let s = 0.5 / self.tau();
        if j == 0 {
            [(0, -3.0 * s), (1, 4.0 * s), (2, -s)]
        } else if j == m {
            [(m, 3.0 * s), (m - 1, -4.0 * s), (m - 2, s)]
        } else {
            [(j - 1, -s), (j + 1, s), (j, 0.0)]
        }
    }

    /// Same grid truncated to the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Self {
        Self {
            horizon: self.t(steps),
            steps,
        }
    }
}

/// Shape of an inline control perturbation; both vanish with their slope at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `sin²(π t / T)`.
    Sin2,
    /// `3s² − 2s³` with `s = t / T`.
    Smoothstep,
}

impl Profile {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        let s = t / horizon;
        match self {
            Profile::Sin2 => (std::f64::consts::PI * s).sin().powi(2),
            Profile::Smoothstep => s * s * (3.0 - 2.0 * s),
        }
    }
}

/// Additive control perturbation on one slot (1-based numbering:
/// `2k − 1` is the pressure at the start of pipe `k`, `2k` the flux at its end).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub slot: usize,
    pub amplitude: f64,
    pub profile: Profile,
}

/// Boundary data `Φ(t_j)` on all `2m` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSignal {
    pub time: TimeGrid,
    /// `values[j][s]` is slot `s` (0-based) at `t_j`.
    pub values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn constant(time: TimeGrid, phi: &[f64]) -> Self {
        Self {
            time,
            values: vec![phi.to_vec(); time.steps + 1],
        }
    }

    pub fn num_slots(&self) -> usize {
        self.values[0].len()
    }

    /// `Φ^e + h` for a reduced control `h`.
    pub fn from_reduced(phi_e: &[f64], reduced: &ControlSignal) -> Self {
        let values = reduced
            .values
            .iter()
            .map(|row| row.iter().zip(phi_e).map(|(h, e)| h + e).collect())
            .collect();
        Self {
            time: reduced.time,
            values,
        }
    }

    /// `Φ − Φ^e`.
    pub fn reduced(&self, phi_e: &[f64]) -> Self {
        let values = self
            .values
            .iter()
            .map(|row| row.iter().zip(phi_e).map(|(v, e)| v - e).collect())
            .collect();
        Self {
            time: self.time,
            values,
        }
    }

    /// Equilibrium data plus perturbations.
    pub fn perturbed(time: TimeGrid, phi_e: &[f64], perturbations: &[Perturbation]) -> Result<Self> {
        let mut signal = Self::constant(time, phi_e);
        for p in perturbations {
            if p.slot == 0 || p.slot > phi_e.len() {
                return Err(GasnetError::Control(format!("slot {} out of range", p.slot)));
            }
            for (j, row) in signal.values.iter_mut().enumerate() {
                row[p.slot - 1] += p.amplitude * p.profile.eval(time.t(j), time.horizon);
            }
        }
        Ok(signal)
    }

    /// Second-order time derivative of the samples.
    pub fn derivative(&self) -> Vec<Vec<f64>> {
        let s = self.num_slots();
        (0..=self.time.steps)
            .map(|j| {
                let mut row = vec![0.0; s];
                for (i, w) in self.time.derivative_stencil(j) {
                    for (r, v) in row.iter_mut().zip(&self.values[i]) {
                        *r += w * v;
                    }
                }
                row
            })
            .collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            time: self.time,
            values: self.values.iter().map(|r| r.iter().map(|v| v * s).collect()).collect(),
        }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &ControlSignal) -> Self {
        Self {
            time: self.time,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + s * y).collect())
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.scaled(0.0)
    }

    /// Truncated to the first `steps` steps.
    pub fn truncated(&self, steps: usize) -> Self {
        Self {
            time: self.time.truncated(steps),
            values: self.values[..=steps].to_vec(),
        }
    }
}

/// Gram matrix of the discrete H² inner product on reduced controls
/// (samples `j = 1..=M`, with `h(0) = 0`).
#[derive(Clone, Debug)]
pub struct H2Gram {
    pub matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    steps: usize,
}

impl H2Gram {
    pub fn new(time: &TimeGrid) -> Result<Self> {
        let m = time.steps;
        let tau = time.tau();
        let mut full = DMatrix::<f64>::zeros(m + 1, m + 1);
        for (j, w) in time.weights().into_iter().enumerate() {
            full[(j, j)] += w;
        }
        let mut add_outer = |idx: &[(usize, f64)], scale: f64| {
            for &(a, ca) in idx {
                for &(b, cb) in idx {
                    full[(a, b)] += scale * ca * cb;
                }
            }
        };
        for j in 0..m {
            add_outer(&[(j, -1.0), (j + 1, 1.0)], 1.0 / tau);
        }
        for j in 1..m {
            add_outer(&[(j - 1, 1.0), (j, -2.0), (j + 1, 1.0)], 1.0 / tau.powi(3));
        }
        let matrix = full.view((1, 1), (m, m)).into_owned();
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or_else(|| GasnetError::Control("H2 Gram matrix is not positive definite".into()))?;
        Ok(Self { matrix, chol, steps: m })
    }

    fn column(signal: &ControlSignal, s: usize) -> DVector<f64> {
        DVector::from_iterator(signal.time.steps, signal.values[1..].iter().map(|r| r[s]))
    }

    /// `⟨a, b⟩_{H²}` summed over slots, evaluated from samples and differences
    /// (equal to `xᵀ G y` without its cancellation).
    pub fn inner(&self, a: &ControlSignal, b: &ControlSignal) -> f64 {
        let m = self.steps;
        let tau = a.time.tau();
        let w = a.time.weights();
        let at = |sig: &ControlSignal, j: usize, s: usize| if j == 0 { 0.0 } else { sig.values[j][s] };
        (0..a.num_slots())
            .map(|s| {
                let (x, y) = (|j| at(a, j, s), |j| at(b, j, s));
                let mass: f64 = (1..=m).map(|j| w[j] * x(j) * y(j)).sum();
                let first: f64 = (0..m).map(|j| (x(j + 1) - x(j)) * (y(j + 1) - y(j))).sum();
                let second: f64 = (1..m)
                    .map(|j| (x(j - 1) - 2.0 * x(j) + x(j + 1)) * (y(j - 1) - 2.0 * y(j) + y(j + 1)))
                    .sum();
                mass + first / tau + second / tau.powi(3)
            })
            .sum()
    }

    pub fn norm(&self, a: &ControlSignal) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }

    /// Solves `G g_s = b_s` per slot; `b.values[0]` is ignored and `g(0) = 0`.
    pub fn riesz(&self, b: &ControlSignal) -> ControlSignal {
        let mut out = b.zeros_like();
        for s in 0..b.num_slots() {
            let g = self.chol.solve(&Self::column(b, s));
            for j in 0..self.steps {
                out.values[j + 1][s] = g[j];
            }
        }
        out
    }
}

/// Bounds defining the admissible reduced controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ControlBounds {
    pub eta: f64,
    pub kappa_u: f64,
}

/// Result of an admissibility check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Admissibility {
    pub h2_norm: f64,
    pub sup_norm: f64,
    pub violations: Vec<String>,
}

impl Admissibility {
    pub fn is_admissible(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `Φ(0) = Φ^e`, inactive slots, and both norm balls.
pub fn check_admissible(
    phi: &ControlSignal,
    phi_e: &[f64],
    active: &[bool],
    gram: &H2Gram,
    bounds: &ControlBounds,
) -> Admissibility {
    let reduced = phi.reduced(phi_e);
    let mut violations = Vec::new();
    if reduced.values[0].iter().any(|&v| v != 0.0) {
        violations.push("control does not start at the equilibrium data".to_string());
    }
    for (s, &a) in active.iter().enumerate() {
        if !a && phi.values.iter().any(|r| r[s] != 0.0) {
            violations.push(format!("slot {} must vanish", s + 1));
        }
    }
    let h2_norm = gram.norm(&reduced);
    let sup_norm = reduced.sup_norm();
    if h2_norm > bounds.eta * (1.0 + 1e-12) {
        violations.push(format!("H2 norm {h2_norm} exceeds eta = {}", bounds.eta));
    }
    if sup_norm > bounds.kappa_u * (1.0 + 1e-12) {
        violations.push(format!("sup norm {sup_norm} exceeds kappa_U = {}", bounds.kappa_u));
    }
    Admissibility {
        h2_norm,
        sup_norm,
        violations,
    }
}
