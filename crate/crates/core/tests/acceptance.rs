//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the report stays readable.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use gasnet_core::adjoint::{green_identity_residual, Linearization, TimePairing};
use gasnet_core::discrete::Generator;
use gasnet_core::forward::linear_solve_with;
use gasnet_core::optimize::{evaluate, gradient, random_feasible, Status};
use gasnet_core::{
    build_grid, delta_homotopy, kirchhoff_residual, optimize, parse_network, pressure_continuity_residual,
    ControlSignal, DiscreteOperator, Model, Objective, Resolution, Scenario, TimeGrid, Trajectory,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn model(name: &str) -> Model {
    Model::from_scenario(&scenario(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
}

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn skew_adjointness() -> Outcome {
    let m = model("figure_one.toml");
    let op = &m.op;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z = op.project(&random_state(&mut rng, op.len()));
        worst = worst.max(op.inner(&op.apply_skew(&z), &z).abs() / op.inner(&z, &z));
    }
    check(worst <= 1e-12, format!("max |(Az, z)| / |z|^2 = {worst:.3e} (limit 1e-12)"))
}

fn lossless_isometry() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/networks/figure_one.toml");
    let doc = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let doc: String = doc
        .lines()
        .map(|l| {
            if l.starts_with("friction") {
                "friction = 0.0".to_string()
            } else if l.starts_with("inclination") {
                "inclination = 0.0".to_string()
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let topology = parse_network(&doc).map_err(|e| e.to_string())?;
    if topology.pipes.iter().any(|p| p.params.beta() != 0.0 || p.params.gamma() != 0.0) {
        return Err("network still has losses".into());
    }
    let grid = build_grid(&topology, &Resolution::PerPipe(vec![16; 6])).map_err(|e| e.to_string())?;
    let op = DiscreteOperator::assemble(&topology, &grid).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u0 = op.project(&random_state(&mut rng, op.len()));
    let time = TimeGrid::new(10.0, 1000).map_err(|e| e.to_string())?;
    let zero = vec![vec![0.0; op.len()]; time.steps + 1];
    let sol = linear_solve_with(&op, &Generator::linear(), &u0, &zero, &time).map_err(|e| e.to_string())?;
    let n0 = op.norm(&u0);
    let drift = sol.states.iter().map(|u| (op.norm(u) / n0 - 1.0).abs()).fold(0.0, f64::max);
    check(drift <= 1e-10, format!("max relative norm drift over 1000 steps = {drift:.3e} (limit 1e-10)"))
}

fn steady_fixed_point() -> Outcome {
    let mut errors = Vec::new();
    for (npm, steps) in [(8.0, 16), (16.0, 32), (32.0, 64)] {
        let mut s = scenario("equilibrium.toml");
        s.grid.nodes_per_meter = Some(npm);
        s.time_steps = steps;
        let m = Model::from_scenario(&s).map_err(|e| e.to_string())?;
        let traj = m.solve(&m.control).map_err(|e| e.to_string())?;
        if traj.truncated {
            return Err("equilibrium run truncated".into());
        }
        errors.push(traj.max_deviation(&m.v_e_analytic));
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|&r| r >= 3.5);
    check(ok, format!("errors [{}], refinement ratios [{}] (need >= 3.5)", list(&errors), list(&ratios)))
}

fn worst_residuals(m: &Model, traj: &Trajectory) -> (f64, f64) {
    traj.states.iter().fold((0.0f64, 0.0f64), |(k, c), v| {
        let kr = kirchhoff_residual(&m.op, v).iter().fold(0.0f64, |a, r| a.max(r.abs()));
        let cr = pressure_continuity_residual(&m.op, v).iter().fold(0.0f64, |a, r| a.max(r.abs()));
        (k.max(kr), c.max(cr))
    })
}

fn junction_residuals() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    let mut solves = 0;
    for name in ["figure_one.toml", "single_pipe.toml", "breach.toml"] {
        let m = model(name);
        let traj = m.solve(&m.control).map_err(|e| format!("{name}: {e}"))?;
        let (k, c) = worst_residuals(&m, &traj);
        worst = (worst.0.max(k), worst.1.max(c));
        solves += 1;
    }
    let m = model("figure_one.toml");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let phi = ControlSignal::from_reduced(&m.phi_e, &random_feasible(&m, &mut rng));
        let traj = m.solve(&phi).map_err(|e| e.to_string())?;
        let (k, c) = worst_residuals(&m, &traj);
        worst = (worst.0.max(k), worst.1.max(c));
        solves += 1;
    }
    check(
        worst.0 <= 1e-10 && worst.1 <= 1e-10,
        format!("{solves} solves, max Kirchhoff {:.3e}, max continuity {:.3e} (limit 1e-10)", worst.0, worst.1),
    )
}

fn lipschitz_bound() -> Outcome {
    let m = model("figure_one.toml");
    let op = &m.op;
    let bound = op.lipschitz_bound(&m.state_box);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        m.bounds.lower.iter().zip(&m.bounds.upper).map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w1, w2) = (draw(&mut rng), draw(&mut rng));
        let f1 = op.nonlinearity(&w1).map_err(|e| e.to_string())?;
        let f2 = op.nonlinearity(&w2).map_err(|e| e.to_string())?;
        let df: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a - b).collect();
        let dw: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - b).collect();
        worst = worst.max(op.norm(&df) / op.norm(&dw));
    }
    check(worst <= bound, format!("max sampled ratio {worst:.4e}, corner bound {bound:.4e}"))
}

fn picard_contraction() -> Outcome {
    let base = scenario("figure_one.toml");
    let tau = base.horizon / base.time_steps as f64;
    let mut means = Vec::new();
    for halvings in 0..4 {
        let mut s = base.clone();
        s.horizon = base.horizon / f64::powi(2.0, halvings);
        s.time_steps = (s.horizon / tau).round() as usize;
        let m = Model::from_scenario(&s).map_err(|e| e.to_string())?;
        let traj = m.solve(&m.control).map_err(|e| e.to_string())?;
        if traj.truncated {
            return Err(format!("T = {} truncated", s.horizon));
        }
        let later = traj.ratios.get(1..).unwrap_or(&[]);
        if later.is_empty() || later.iter().any(|&d| !(d < 1.0)) {
            return Err(format!("T = {}: ratios {:?}", s.horizon, traj.ratios));
        }
        means.push(later.iter().sum::<f64>() / later.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    check(monotone, format!("mean ratio for T, T/2, T/4, T/8: [{}]", list(&means)))
}

fn green_identity() -> Outcome {
    let m = model("figure_one.toml");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let phi = ControlSignal::from_reduced(&m.phi_e, &random_feasible(&m, &mut rng));
        let base = m.solve(&phi).map_err(|e| e.to_string())?;
        let lin = Linearization::new(&m.op, &base).map_err(|e| e.to_string())?;
        let h = random_feasible(&m, &mut rng);
        let misfit: Vec<Vec<f64>> = base
            .states
            .iter()
            .map(|v| v.iter().zip(&m.v_e).map(|(a, b)| a - b * (1.0 + 0.1 * rng.gen_range(-1.0..1.0))).collect())
            .collect();
        let g = green_identity_residual(&m.op, &base, &lin, &h, &misfit, TimePairing::Consistent)
            .map_err(|e| e.to_string())?;
        worst = worst.max(g.relative);
    }
    check(worst <= 1e-10, format!("20 instances, max relative residual {worst:.3e} (limit 1e-10)"))
}

fn gradient_vs_fd() -> Outcome {
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for name in ["single_pipe.toml", "figure_one.toml"] {
        let m = model(name);
        let obj = Objective {
            bounds: &m.constraint_bounds,
            rho: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let h = random_feasible(&m, &mut rng).scaled(0.5);
            let eval = evaluate(&m, &h, &obj).map_err(|e| e.to_string())?;
            let g = gradient(&m, &h, &obj, &eval).map_err(|e| e.to_string())?;
            for _ in 0..5 {
                let d = random_feasible(&m, &mut rng).scaled(0.5);
                let plus = evaluate(&m, &h.axpy(eps, &d), &obj).map_err(|e| e.to_string())?.cost();
                let minus = evaluate(&m, &h.axpy(-eps, &d), &obj).map_err(|e| e.to_string())?.cost();
                let fd = (plus - minus) / (2.0 * eps);
                let ad = m.gram.inner(&g.riesz, &d);
                worst = worst.max((fd - ad).abs() / fd.abs().max(ad.abs()));
            }
        }
    }
    check(worst <= 1e-4, format!("2 networks x 5 controls x 5 directions, max relative error {worst:.3e}"))
}

fn nonincreasing(values: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = values.collect();
    v.windows(2).all(|w| w[1] <= w[0])
}

fn optimization_sanity() -> Outcome {
    let ic = model("inverse_crime.toml");
    let r = optimize(&ic, &ic.constraint_bounds).map_err(|e| e.to_string())?;
    let reduction = r.final_cost / r.initial_cost;
    let eq = model("equilibrium.toml");
    let r0 = optimize(&eq, &eq.constraint_bounds).map_err(|e| e.to_string())?;
    let cons = model("constrained.toml");
    let rc = optimize(&cons, &cons.constraint_bounds).map_err(|e| e.to_string())?;
    let mono_ic = nonincreasing(r.history.iter().map(|h| h.cost));
    let mono_cons = rc
        .history
        .chunk_by(|a, b| a.rho == b.rho)
        .all(|level| nonincreasing(level.iter().map(|h| h.objective)));
    check(
        reduction <= 1e-6 && r0.iterations == 0 && r0.status == Status::Converged && mono_ic && mono_cons,
        format!(
            "inverse-crime J ratio {reduction:.3e} in {} iterations; equilibrium {} iterations; monotone J {mono_ic}, monotone penalized objective per weight {mono_cons}",
            r.iterations, r0.iterations
        ),
    )
}

fn delta_homotopy_check() -> Outcome {
    let m = model("homotopy.toml");
    let direct = optimize(&m, &m.constraint_bounds).map_err(|e| e.to_string())?;
    let runs = delta_homotopy(&m, &[1.0, 0.9]);
    let one = runs[0].as_ref().map_err(|e| e.to_string())?;
    let bits = |r: &gasnet_core::OptimizationReport| -> Vec<u64> {
        r.history.iter().map(|h| h.objective.to_bits()).chain(r.control.values.iter().flatten().map(|v| v.to_bits())).collect()
    };
    let identical = bits(one) == bits(&direct);
    let shrunk = runs[1].as_ref().map_err(|e| e.to_string())?;
    let feasible = shrunk.kkt.max_violation == 0.0;
    let residual = shrunk.kkt.variational_residual;

    let cons = model("constrained.toml");
    let rc = optimize(&cons, &cons.constraint_bounds).map_err(|e| e.to_string())?;
    let nonneg = rc.kkt.multipliers.iter().all(|l| l.value >= 0.0);
    let positive = rc.kkt.multipliers.iter().filter(|l| l.value > 0.0).count();
    let comp = rc.kkt.complementarity;
    check(
        identical && feasible && residual >= -1e-5 && nonneg && positive > 0 && comp <= 1e-6,
        format!(
            "delta = 1 bit-identical {identical}; delta = 0.9 feasible {feasible}, KKT residual {residual:.3e}; constrained: {positive} positive multipliers, all nonnegative {nonneg}, complementarity {comp:.3e}"
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("AC1 skew-adjointness", skew_adjointness),
        ("AC2 lossless isometry", lossless_isometry),
        ("AC3 steady fixed point", steady_fixed_point),
        ("AC4 junction residuals", junction_residuals),
        ("AC5 Lipschitz bound", lipschitz_bound),
        ("AC6 Picard contraction", picard_contraction),
        ("AC7 Green identity", green_identity),
        ("AC8 gradient vs finite differences", gradient_vs_fd),
        ("AC9 optimization sanity", optimization_sanity),
        ("AC10 delta homotopy and multipliers", delta_homotopy_check),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
