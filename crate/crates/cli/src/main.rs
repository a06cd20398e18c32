use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gasnet_core::adjoint::{adjoint_solve, Linearization};
use gasnet_core::io::{write_adjoint, write_control, write_diagnostics, write_iterations, write_states};
use gasnet_core::optimize::misfit;
use gasnet_core::verify::run_battery;
use gasnet_core::{
    delta_homotopy, optimize, BoxBounds, Face, GasnetError, Model, Objective, OptimizationReport, Result, Scenario, Status,
    StepDiagnostics,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "gasnet", version, about = "Gas network simulation and boundary control")]
struct Cli {
    /// Worker threads for the parallel checks (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve with the scenario control.
    Simulate {
        scenario: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Optimal control run, plus the homotopy if the scenario configures one.
    Optimize {
        scenario: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Property battery on the scenario discretization.
    Verify {
        scenario: PathBuf,
        /// Perturbs the transport operator (negative control for the battery).
        #[arg(long, hide = true)]
        corrupt_operator: Option<f64>,
    },
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    status: &'static str,
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct SimulateSummary {
    status: &'static str,
    requested_horizon: f64,
    achieved_horizon: f64,
    time_steps: usize,
    picard_iters: usize,
    contraction_ratios: Vec<f64>,
    max_kirchhoff: f64,
    max_continuity: f64,
    max_deviation_from_equilibrium: f64,
    min_rball_dist: f64,
    min_box_margin: f64,
}

#[derive(Serialize)]
struct KktSummary {
    gradient_norm: f64,
    multiplier_count: usize,
    positive_multipliers: usize,
    max_multiplier: f64,
    complementarity: f64,
    zeta: f64,
    variational_residual: f64,
    max_violation: f64,
}

#[derive(Serialize)]
struct RunSummary {
    status: Status,
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    reduction: f64,
    final_objective: f64,
    rho: f64,
    kkt: KktSummary,
}

#[derive(Serialize)]
struct HomotopyEntry {
    delta: f64,
    directory: Option<String>,
    summary: Option<RunSummary>,
    error: Option<String>,
}

#[derive(Serialize)]
struct OptimizeSummary {
    #[serde(flatten)]
    run: RunSummary,
    homotopy: Vec<HomotopyEntry>,
}

#[derive(Serialize)]
struct MultiplierRow {
    t: f64,
    pipe: usize,
    x: f64,
    variable: &'static str,
    face: Face,
    value: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GasnetError::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(GasnetError::Precondition(format!("non-finite {name}: {v}"))),
        None => Ok(()),
    }
}

fn load_model(path: &Path, seed: Option<u64>) -> Result<Model> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Model::from_scenario(&scenario)
}

fn simulate(model: &Model, out: &Path) -> Result<SimulateSummary> {
    fs::create_dir_all(out)?;
    let traj = model.solve(&model.control)?;
    write_states(&out.join("trajectory.csv"), &model.op.grid, &traj.time, &traj.states)?;
    write_diagnostics(&out.join("diagnostics.csv"), &traj)?;
    let min = |f: fn(&StepDiagnostics) -> f64| traj.diagnostics.iter().map(f).fold(f64::INFINITY, f64::min);
    let summary = SimulateSummary {
        status: if traj.truncated { "truncated-horizon" } else { "complete" },
        requested_horizon: traj.requested_horizon,
        achieved_horizon: traj.time.horizon,
        time_steps: traj.time.steps,
        picard_iters: traj.picard_iters,
        contraction_ratios: traj.ratios.clone(),
        max_kirchhoff: traj.max_kirchhoff(),
        max_continuity: traj.max_continuity(),
        max_deviation_from_equilibrium: traj.max_deviation(&model.v_e),
        min_rball_dist: min(|d| d.rball_dist),
        min_box_margin: min(|d| d.box_margin),
    };
    finite("contraction ratio", &summary.contraction_ratios)?;
    finite(
        "summary value",
        &[
            summary.max_kirchhoff,
            summary.max_continuity,
            summary.max_deviation_from_equilibrium,
            summary.min_rball_dist,
            summary.min_box_margin,
        ],
    )?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_summary(report: &OptimizationReport) -> Result<RunSummary> {
    let kkt = &report.kkt;
    let summary = RunSummary {
        status: report.status,
        iterations: report.iterations,
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        reduction: if report.initial_cost > 0.0 { report.final_cost / report.initial_cost } else { 0.0 },
        final_objective: report.final_objective,
        rho: report.rho,
        kkt: KktSummary {
            gradient_norm: kkt.gradient_norm,
            multiplier_count: kkt.multipliers.len(),
            positive_multipliers: kkt.multipliers.iter().filter(|m| m.value > 0.0).count(),
            max_multiplier: kkt.multipliers.iter().map(|m| m.value).fold(0.0, f64::max),
            complementarity: kkt.complementarity,
            zeta: kkt.zeta,
            variational_residual: kkt.variational_residual,
            max_violation: kkt.max_violation,
        },
    };
    finite(
        "summary value",
        &[
            summary.initial_cost,
            summary.final_cost,
            summary.reduction,
            summary.final_objective,
            summary.kkt.gradient_norm,
            summary.kkt.max_multiplier,
            summary.kkt.complementarity,
            summary.kkt.variational_residual,
            summary.kkt.max_violation,
        ],
    )?;
    Ok(summary)
}

fn write_multipliers(path: &Path, model: &Model, report: &OptimizationReport) -> Result<()> {
    let grid = &model.op.grid;
    let mut w = csv::Writer::from_path(path).map_err(GasnetError::Csv)?;
    for m in &report.kkt.multipliers {
        let (k, i) = grid.locate(m.index / 2);
        let row = MultiplierRow {
            t: report.trajectory.time.t(m.step),
            pipe: k + 1,
            x: grid.x(k, i),
            variable: if m.index % 2 == 0 { "p" } else { "q" },
            face: m.face,
            value: m.value,
        };
        finite("multiplier", &[row.value])?;
        w.serialize(row).map_err(GasnetError::Csv)?;
    }
    w.flush()?;
    Ok(())
}

/// Adjoint of the penalized objective along the final trajectory.
fn write_final_adjoint(path: &Path, model: &Model, report: &OptimizationReport, bounds: &BoxBounds) -> Result<()> {
    let traj = &report.trajectory;
    let obj = Objective { bounds, rho: report.rho };
    let lin = Linearization::new(&model.op, traj)?;
    let adjoint = adjoint_solve(&model.op, traj, &lin, &misfit(model, traj, &obj))?;
    write_adjoint(path, &model.op.grid, &traj.time, &adjoint)
}

/// Writes the artifacts of one optimization run into `dir`.
fn write_run(dir: &Path, model: &Model, report: &OptimizationReport, bounds: &BoxBounds) -> Result<RunSummary> {
    fs::create_dir_all(dir)?;
    write_final_adjoint(&dir.join("adjoint.csv"), model, report, bounds)?;
    write_iterations(&dir.join("iterations.csv"), &report.history)?;
    write_control(&dir.join("control.csv"), &report.control)?;
    write_states(&dir.join("trajectory.csv"), &model.op.grid, &report.trajectory.time, &report.trajectory.states)?;
    write_multipliers(&dir.join("multipliers.csv"), model, report)?;
    let summary = run_summary(report)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_optimize(model: &Model, out: &Path, quiet: bool) -> Result<OptimizeSummary> {
    let report = optimize(model, &model.constraint_bounds)?;
    let run = write_run(out, model, &report, &model.constraint_bounds)?;
    if !quiet {
        eprintln!(
            "optimize: {:?} after {} iterations, J {:.6e} -> {:.6e}",
            report.status, report.iterations, report.initial_cost, report.final_cost
        );
    }
    let mut homotopy = Vec::new();
    for (i, (delta, result)) in model.deltas.iter().zip(delta_homotopy(model, &model.deltas)).enumerate() {
        let name = format!("delta-{i}");
        let bounds = model.constraint_bounds.shrink(&model.v_e, *delta);
        let entry = match result.and_then(|r| write_run(&out.join("homotopy").join(&name), model, &r, &bounds)) {
            Ok(summary) => HomotopyEntry {
                delta: *delta,
                directory: Some(format!("homotopy/{name}")),
                summary: Some(summary),
                error: None,
            },
            Err(e) => HomotopyEntry {
                delta: *delta,
                directory: None,
                summary: None,
                error: Some(e.to_string()),
            },
        };
        if !quiet {
            match &entry.summary {
                Some(s) => eprintln!("homotopy delta = {delta}: {:?}, J = {:.6e}", s.status, s.final_cost),
                None => eprintln!("homotopy delta = {delta}: {}", entry.error.as_deref().unwrap_or_default()),
            }
        }
        homotopy.push(entry);
    }
    let summary = OptimizeSummary { run, homotopy };
    write_json(&out.join("optimize_summary.json"), &summary)?;
    Ok(summary)
}

fn error_exit(e: &GasnetError) -> ExitCode {
    let doc = ErrorDocument {
        status: "error",
        kind: e.kind(),
        message: e.to_string(),
    };
    eprintln!("{}", serde_json::to_string(&doc).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return error_exit(&GasnetError::Precondition(format!("threads: {e}")));
        }
    }
    match &cli.command {
        Command::Simulate { scenario, output } => {
            match load_model(scenario, cli.seed).and_then(|m| simulate(&m, output)) {
                Ok(s) => {
                    if !cli.quiet {
                        eprintln!("simulate: {} up to T = {} ({} steps)", s.status, s.achieved_horizon, s.time_steps);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => error_exit(&e),
            }
        }
        Command::Optimize { scenario, output } => {
            match load_model(scenario, cli.seed).and_then(|m| run_optimize(&m, output, cli.quiet)) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => error_exit(&e),
            }
        }
        Command::Verify {
            scenario,
            corrupt_operator,
        } => {
            let mut model = match load_model(scenario, cli.seed) {
                Ok(m) => m,
                Err(e) => return error_exit(&e),
            };
            if let Some(amount) = corrupt_operator {
                model.op = model.op.clone().corrupted(*amount);
            }
            let report = run_battery(&model, model.cost.seed);
            print!("{}", report.table());
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.name).collect();
                eprintln!("verify: failed checks: {}", names.join(", "));
                ExitCode::FAILURE
            }
        }
    }
}
