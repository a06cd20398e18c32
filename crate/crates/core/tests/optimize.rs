mod common;

use common::{model, model_from, single_pipe};
use gasnet_core::adjoint::{linearized_solve, Linearization};
use gasnet_core::control::H2Gram;
use gasnet_core::optimize::{evaluate, gradient, random_feasible, Objective};
use gasnet_core::{
    cost, delta_homotopy, kkt_residual, optimize, project_feasible, riesz_gradient, ControlSignal, GasnetError,
    TimeGrid,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn equilibrium_costs_nothing() {
    let m = model_from(&single_pipe("", "")).unwrap();
    let j = cost(&m, &ControlSignal::from_reduced(&m.phi_e, &m.zero_control())).unwrap();
    assert!(j.abs() < 1e-24, "{j}");
}

#[test]
fn constant_pressure_offset_cost() {
    let eps = 0.03;
    let m = model_from(&single_pipe("", &format!("[target]\nkind = \"equilibrium\"\np_offset = {eps}\n"))).unwrap();
    let phi = ControlSignal::from_reduced(&m.phi_e, &m.zero_control());
    let j = cost(&m, &phi).unwrap();
    // D = 0.5, L = 1, T = 1
    let expected = 0.5 * eps * eps * 0.25 * 1.0 * 1.0;
    assert!((j - expected).abs() < 1e-12 * expected, "{j} vs {expected}");
}

#[test]
fn doubling_sigma_adds_half_sigma_norm() {
    let doc = |sigma: f64| single_pipe(&format!("sigma = {sigma}"), "");
    let (m1, m2) = (model_from(&doc(1e-3)).unwrap(), model_from(&doc(2e-3)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random_feasible(&m1, &mut rng);
    let phi = ControlSignal::from_reduced(&m1.phi_e, &h);
    let (j1, j2) = (cost(&m1, &phi).unwrap(), cost(&m2, &phi).unwrap());
    let extra = 0.5 * 1e-3 * m1.gram.inner(&h, &h);
    assert!((j2 - j1 - extra).abs() <= 1e-12 * j2, "{} vs {extra}", j2 - j1);
}

#[test]
fn gradient_vanishes_at_equilibrium() {
    let m = model_from(&single_pipe("", "")).unwrap();
    let g = riesz_gradient(&m, &ControlSignal::from_reduced(&m.phi_e, &m.zero_control())).unwrap();
    assert!(g.sup_norm() < 1e-14, "{}", g.sup_norm());
}

#[test]
fn zero_data_gradient_is_sigma_h() {
    let m = model_from(&single_pipe("", "")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random_feasible(&m, &mut rng);
    let obj = Objective {
        bounds: &m.constraint_bounds,
        rho: 0.0,
    };
    let mut eval = evaluate(&m, &h, &obj).unwrap();
    // make the misfit vanish by tracking the trajectory itself
    let mut m2 = m.clone();
    m2.cost.target.states = eval.trajectory.states.clone();
    eval.tracking = 0.0;
    let g = gradient(&m2, &h, &obj, &eval).unwrap();
    let diff = g.riesz.axpy(-m.cost.sigma, &h);
    assert!(diff.sup_norm() < 1e-14, "{}", diff.sup_norm());
}

#[test]
fn raw_gradient_pairs_with_linearized_map() {
    let m = model("figure_one.toml");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = random_feasible(&m, &mut rng);
    let d = random_feasible(&m, &mut rng);
    let obj = Objective {
        bounds: &m.constraint_bounds,
        rho: 0.0,
    };
    let eval = evaluate(&m, &h, &obj).unwrap();
    let g = gradient(&m, &h, &obj, &eval).unwrap();
    let lhs: f64 = g.raw.values.iter().flatten().zip(d.values.iter().flatten()).map(|(a, b)| a * b).sum::<f64>()
        + m.cost.sigma * m.gram.inner(&h, &d);
    let traj = &eval.trajectory;
    let lin = Linearization::new(&m.op, traj).unwrap();
    let sens = linearized_solve(&m.op, traj, &lin, &d).unwrap().state_derivative();
    let weights = traj.time.weights();
    let rhs: f64 = (0..traj.states.len())
        .map(|j| {
            let e: Vec<f64> = traj.states[j].iter().zip(m.cost.target.at(j)).map(|(a, b)| a - b).collect();
            weights[j] * m.op.inner(&e, &sens[j])
        })
        .sum::<f64>()
        + m.cost.sigma * m.gram.inner(&h, &d);
    assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    // the Riesz representer reproduces the same pairing in the H² metric
    let riesz_pair = m.gram.inner(&g.riesz, &d);
    assert!((riesz_pair - lhs).abs() <= 1e-9 * lhs.abs(), "{riesz_pair} vs {lhs}");
}

fn ramp(time: TimeGrid, amplitude: f64) -> ControlSignal {
    let mut h = ControlSignal::constant(time, &[0.0, 0.0]);
    for j in 0..=time.steps {
        h.values[j][0] = amplitude * time.t(j) / time.horizon;
        h.values[j][1] = -0.5 * amplitude * (time.t(j) / time.horizon).powi(2);
    }
    h
}

#[test]
fn projection_scales_onto_h2_ball() {
    let time = TimeGrid::new(1.0, 20).unwrap();
    let gram = H2Gram::new(&time).unwrap();
    let h = ramp(time, 1.0);
    let eta = 0.5 * gram.norm(&h);
    let p = project_feasible(&h, &gram, eta, 1e9).unwrap();
    for (a, b) in p.values.iter().flatten().zip(h.values.iter().flatten()) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn projection_keeps_feasible_and_is_idempotent() {
    let time = TimeGrid::new(2.0, 16).unwrap();
    let gram = H2Gram::new(&time).unwrap();
    let h = ramp(time, 0.1);
    assert_eq!(project_feasible(&h, &gram, 10.0, 1.0).unwrap(), h);
    let big = ramp(time, 7.0);
    let once = project_feasible(&big, &gram, 1.0, 0.3).unwrap();
    let twice = project_feasible(&once, &gram, 1.0, 0.3).unwrap();
    assert_eq!(once, twice);
    assert!(once.sup_norm() <= 0.3 * (1.0 + 1e-15) && gram.norm(&once) <= 1.0 * (1.0 + 1e-15));
}

#[test]
fn projection_rejects_nonzero_initial_value() {
    let time = TimeGrid::new(1.0, 4).unwrap();
    let gram = H2Gram::new(&time).unwrap();
    let mut h = ramp(time, 0.1);
    h.values[0][0] = 0.1;
    assert!(matches!(project_feasible(&h, &gram, 1.0, 1.0), Err(GasnetError::Control(_))));
}

#[test]
fn interior_optimum_has_small_kkt_residual_and_perturbation_breaks_it() {
    let m = model_from(&single_pipe(
        "sigma = 1e-4",
        "[target]\nkind = \"manufactured\"\nperturbations = [{ slot = 1, amplitude = 0.02, profile = \"sin2\" }]\n\n[optimizer]\ntol = 1e-9\nmax_iters = 400\n",
    ))
    .unwrap();
    let r = optimize(&m, &m.constraint_bounds).unwrap();
    assert!(r.kkt.multipliers.is_empty());
    let at_opt = kkt_residual(&m, &r.control, &m.constraint_bounds, 0.0).unwrap();
    assert!(at_opt >= -1e-6, "{at_opt}");
    let mut off = r.control.reduced(&m.phi_e);
    for (j, row) in off.values.iter_mut().enumerate().skip(1) {
        row[0] -= 0.01 * (j as f64 / m.time.steps as f64);
    }
    let perturbed = kkt_residual(&m, &ControlSignal::from_reduced(&m.phi_e, &off), &m.constraint_bounds, 0.0).unwrap();
    assert!(perturbed < -1e3 * at_opt.abs().max(1e-9), "{perturbed} vs {at_opt}");
}

#[test]
fn accepted_steps_never_increase_the_objective() {
    let m = model("constrained.toml");
    let r = optimize(&m, &m.constraint_bounds).unwrap();
    for w in r.history.windows(2) {
        if w[0].rho == w[1].rho {
            assert!(w[1].objective <= w[0].objective, "{} -> {}", w[0].objective, w[1].objective);
        }
    }
    assert!(r.kkt.multipliers.iter().all(|l| l.value >= 0.0));
    assert!(r.kkt.multipliers.iter().any(|l| l.value > 0.0));
}

#[test]
fn homotopy_rejects_nonpositive_delta_and_continues() {
    let m = model_from(&single_pipe("", "")).unwrap();
    let runs = delta_homotopy(&m, &[0.0, 1.0]);
    assert!(matches!(runs[0], Err(GasnetError::Precondition(_))));
    let ok = runs[1].as_ref().unwrap();
    assert_eq!(ok.delta, Some(1.0));
    assert_eq!(ok.iterations, 0);
}

#[test]
fn small_delta_confines_states_near_equilibrium() {
    let m = model("constrained.toml");
    let r = delta_homotopy(&m, &[0.05]).remove(0).unwrap();
    let shrunk = m.constraint_bounds.shrink(&m.v_e, 0.05);
    let width: f64 = shrunk.upper.iter().zip(&shrunk.lower).map(|(u, l)| u - l).fold(f64::INFINITY, f64::min);
    let dev = r.trajectory.max_deviation(&m.v_e);
    assert!(dev < 2.0 * width, "{dev} vs {width}");
}
