//! Property battery run by `gasnet verify` on a scenario's discretization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{green_identity_residual, Linearization, TimePairing};
use crate::control::ControlSignal;
use crate::error::Result;
use crate::optimize::{evaluate, gradient, random_feasible, Objective};
use crate::scenario::Model;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: value.is_finite() && value <= threshold,
            value,
            threshold,
            detail,
        }
    }

    fn failed(name: &'static str, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed: false,
            value: f64::NAN,
            threshold,
            detail,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:<6} {:>12} {:>12}\n", "check", "result", "value", "threshold");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<22} {:<6} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold,
                c.detail
            ));
        }
        out
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `max |(A z, z)_M| / ‖z‖²_M` over random constrained states.
pub fn skew_check(model: &Model, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let op = &model.op;
    let worst = (0..samples)
        .map(|_| {
            let z = op.project(&random_vec(rng, op.len()));
            op.inner(&op.apply_skew(&z), &z).abs() / op.inner(&z, &z)
        })
        .fold(0.0, f64::max);
    CheckResult::new("skew_adjointness", worst, 1e-12, format!("{samples} random states"))
}

/// Idempotence and M-symmetry of the constraint projector.
pub fn projector_check(model: &Model, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let op = &model.op;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (x, y) = (random_vec(rng, op.len()), random_vec(rng, op.len()));
        let px = op.project(&x);
        let ppx = op.project(&px);
        let diff: Vec<f64> = px.iter().zip(&ppx).map(|(a, b)| a - b).collect();
        worst = worst.max(op.norm(&diff) / op.norm(&x));
        let sym = (op.inner(&px, &y) - op.inner(&x, &op.project(&y))).abs() / (op.norm(&x) * op.norm(&y));
        worst = worst.max(sym);
    }
    CheckResult::new("projector", worst, 1e-12, format!("{samples} random pairs"))
}

/// Discrete Green identity for random directions and targets.
pub fn green_check(model: &Model, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    const NAME: &str = "green_identity";
    let op = &model.op;
    let base_h = random_feasible(model, rng);
    let base = match model.solve(&ControlSignal::from_reduced(&model.phi_e, &base_h)) {
        Ok(t) => t,
        Err(e) => return CheckResult::failed(NAME, 1e-10, e.to_string()),
    };
    let lin = match Linearization::new(op, &base) {
        Ok(l) => l,
        Err(e) => return CheckResult::failed(NAME, 1e-10, e.to_string()),
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let h = random_feasible(model, rng);
        let misfit: Vec<Vec<f64>> = base
            .states
            .iter()
            .map(|v| v.iter().zip(&model.v_e).map(|(a, b)| a - b + 0.1 * rng.gen_range(-1.0..1.0) * b).collect())
            .collect();
        match green_identity_residual(op, &base, &lin, &h, &misfit, TimePairing::Consistent) {
            Ok(g) => worst = worst.max(g.relative),
            Err(e) => return CheckResult::failed(NAME, 1e-10, e.to_string()),
        }
    }
    CheckResult::new(NAME, worst, 1e-10, format!("{samples} random (h, v_d)"))
}

/// Relative gap between the adjoint directional derivative and a central
/// difference quotient of the cost.
pub fn gradient_check(model: &Model, directions: usize, eps: f64, rng: &mut ChaCha8Rng) -> CheckResult {
    const NAME: &str = "gradient_vs_fd";
    let threshold = 1e-4;
    let obj = Objective {
        bounds: &model.constraint_bounds,
        rho: 0.0,
    };
    let h = random_feasible(model, rng).scaled(0.5);
    let mut run = || -> Result<f64> {
        let eval = evaluate(model, &h, &obj)?;
        let g = gradient(model, &h, &obj, &eval)?;
        let dirs: Vec<ControlSignal> = (0..directions).map(|_| random_feasible(model, rng).scaled(0.5)).collect();
        let errs: Vec<Result<f64>> = dirs
            .par_iter()
            .map(|d| {
                let plus = evaluate(model, &h.axpy(eps, d), &obj)?.cost();
                let minus = evaluate(model, &h.axpy(-eps, d), &obj)?.cost();
                let fd = (plus - minus) / (2.0 * eps);
                let ad = model.gram.inner(&g.riesz, d);
                Ok((fd - ad).abs() / fd.abs().max(ad.abs()).max(f64::MIN_POSITIVE))
            })
            .collect();
        errs.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
    };
    match run() {
        Ok(worst) => CheckResult::new(NAME, worst, threshold, format!("{directions} directions, eps = {eps:e}")),
        Err(e) => CheckResult::failed(NAME, threshold, e.to_string()),
    }
}

/// Sampled Lipschitz ratio of the friction term over box-valued pairs,
/// relative to the analytic bound (passes when at most 1).
pub fn lipschitz_check(model: &Model, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    const NAME: &str = "lipschitz_ratio";
    let op = &model.op;
    let bound = op.lipschitz_bound(&model.state_box);
    let b = &model.bounds;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        b.lower.iter().zip(&b.upper).map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let (w1, w2) = (draw(rng), draw(rng));
        let (f1, f2) = match (op.nonlinearity(&w1), op.nonlinearity(&w2)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::failed(NAME, 1.0, e.to_string()),
        };
        let df: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        let dw: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - b).collect();
        let ratio = op.norm(&df) / op.norm(&dw);
        worst = worst.max(if bound > 0.0 { ratio / bound } else { ratio });
    }
    CheckResult::new(NAME, worst, 1.0, format!("{samples} pairs, bound {bound:.6e}"))
}

/// Residual of `(p²)'/2 + γ p² + β q² = 0` for the closed-form profile,
/// with a fourth-order difference quotient.
pub fn steady_ode_check(model: &Model) -> CheckResult {
    let mut worst = 0.0f64;
    for k in 0..model.topology.num_pipes() {
        let params = model.steady.params(k);
        let (l, q) = (params.length, model.steady.flux(k));
        let (beta, gamma) = (params.beta(), params.gamma());
        let h = 1e-3 * l;
        let f = |x: f64| model.steady.pressure(k, x).powi(2);
        for s in 1..20 {
            let x = 0.1 * l + 0.8 * l * s as f64 / 20.0;
            let d = (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h);
            worst = worst.max((0.5 * d + gamma * f(x) + beta * q * q).abs());
        }
    }
    CheckResult::new("steady_state_ode", worst, 1e-9, "closed-form profile, 19 points per pipe".into())
}

/// Runs every check with a reproducible random stream.
pub fn run_battery(model: &Model, seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks = vec![
        skew_check(model, 100, &mut rng),
        projector_check(model, 20, &mut rng),
        green_check(model, 5, &mut rng),
        gradient_check(model, 5, 1e-4, &mut rng),
        lipschitz_check(model, 1000, &mut rng),
        steady_ode_check(model),
    ];
    VerifyReport { checks }
}
