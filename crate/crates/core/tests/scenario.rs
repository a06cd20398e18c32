mod common;

use common::{model, model_from, single_pipe};
use gasnet_core::adjoint::{green_identity_residual, Linearization, TimePairing};
use gasnet_core::io::{write_control, write_states};
use gasnet_core::optimize::random_feasible;
use gasnet_core::{ControlSignal, GasnetError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("gasnet-scenario-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn inline_network_matches_file_network() {
    let inline = single_pipe("", "").replace(
        "network = \"networks/single_pipe.toml\"",
        r#"network = { vertices = ["in", "out"], constants = { c = 1.0, g = 9.81 }, pipes = [{ id = "p1", from = "in", to = "out", length = 1.0, diameter = 0.5, friction = 0.2, inclination = 0.01 }] }"#,
    );
    let (a, b) = (model_from(&inline).unwrap(), model_from(&single_pipe("", "")).unwrap());
    assert_eq!(a.v_e, b.v_e);
    assert_eq!(a.phi_e, b.phi_e);
}

#[test]
fn default_kappa_saturates_lift_condition() {
    let m = model_from(&single_pipe("", "")).unwrap();
    let ratio = m.c1 * m.control_bounds.kappa_u / m.radius;
    assert!((ratio - 0.1).abs() < 1e-14, "{ratio}");
}

#[test]
fn oversized_kappa_is_rejected() {
    let err = model_from(&single_pipe("kappa_u = 5.0", "")).unwrap_err();
    assert!(matches!(err, GasnetError::Precondition(_)), "{err}");
}

#[test]
fn target_outside_box_is_rejected() {
    let err = model_from(&single_pipe("", "[target]\nkind = \"equilibrium\"\np_offset = 5.0\n")).unwrap_err();
    assert!(err.to_string().contains("target"), "{err}");
}

#[test]
fn unknown_target_kind_is_rejected() {
    let err = model_from(&single_pipe("", "[target]\nkind = \"banana\"\n")).unwrap_err();
    assert!(matches!(err, GasnetError::Scenario(_)), "{err}");
}

#[test]
fn nonpositive_sigma_is_rejected() {
    assert!(model_from(&single_pipe("sigma = 0.0", "")).is_err());
}

#[test]
fn control_file_round_trips_through_scenario() {
    let base = model_from(&single_pipe("", "")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = ControlSignal::from_reduced(&base.phi_e, &random_feasible(&base, &mut rng));
    let dir = scratch("control");
    let path = dir.join("control.csv");
    write_control(&path, &phi).unwrap();
    let doc = single_pipe("", &format!("[control]\nfile = {:?}\n", path.to_string_lossy()));
    let m = model_from(&doc).unwrap();
    assert_eq!(m.control, phi);
    let both = single_pipe(
        "",
        &format!(
            "[control]\nfile = {:?}\nperturbations = [{{ slot = 1, amplitude = 0.01, profile = \"sin2\" }}]\n",
            path.to_string_lossy()
        ),
    );
    assert!(model_from(&both).is_err());
}

#[test]
fn trajectory_file_target_is_read_back() {
    let m = model("single_pipe.toml");
    let traj = m.solve(&m.control).unwrap();
    let dir = scratch("target");
    let path = dir.join("target.csv");
    write_states(&path, &m.op.grid, &traj.time, &traj.states).unwrap();
    let text = std::fs::read_to_string(common::scenarios().join("single_pipe.toml")).unwrap();
    let doc = format!("{text}\n[target]\nkind = \"trajectory_file\"\npath = {:?}\n", path.to_string_lossy());
    let s = gasnet_core::Scenario::from_toml(&doc, common::scenarios()).unwrap();
    let m2 = gasnet_core::Model::from_scenario(&s).unwrap();
    assert_eq!(m2.cost.target.states, traj.states);
}

#[test]
fn mismatched_time_pairing_breaks_green_identity() {
    let m = model("single_pipe.toml");
    let base = m.solve(&m.control).unwrap();
    let lin = Linearization::new(&m.op, &base).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = random_feasible(&m, &mut rng);
    let misfit: Vec<Vec<f64>> =
        base.states.iter().map(|v| v.iter().zip(&m.v_e).map(|(a, b)| a - b + 0.01).collect()).collect();
    let good = green_identity_residual(&m.op, &base, &lin, &h, &misfit, TimePairing::Consistent).unwrap();
    let bad = green_identity_residual(&m.op, &base, &lin, &h, &misfit, TimePairing::Mismatched).unwrap();
    assert!(good.relative < 1e-10, "{}", good.relative);
    assert!(bad.relative > 1e-6, "{}", bad.relative);
}
