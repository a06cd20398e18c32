//! CSV emission and ingestion for trajectories, diagnostics, controls and
//! optimizer logs. Floats are written in shortest round-trip form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjoint::AdjointTrajectory;
use crate::control::{ControlSignal, TimeGrid};
use crate::discrete::Grid;
use crate::error::{GasnetError, Result};
use crate::forward::Trajectory;
use crate::optimize::IterationRecord;

#[derive(Serialize, Deserialize)]
struct StateRow {
    t: f64,
    pipe: usize,
    x: f64,
    p: f64,
    q: f64,
}

#[derive(Serialize)]
struct DiagnosticsRow {
    t: f64,
    picard_iters: usize,
    delta: f64,
    kirchhoff_max: f64,
    rball_dist: f64,
    box_margin: f64,
    continuity_max: f64,
}

#[derive(Serialize, Deserialize)]
struct ControlRow {
    t: f64,
    slot: usize,
    value: f64,
}

fn finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(GasnetError::Control(format!("refusing to write non-finite {name} value {v}"))),
        None => Ok(()),
    }
}

/// Writes `states` as rows `(t, pipe, x, p, q)` with 1-based pipe indices.
pub fn write_states(path: &Path, grid: &Grid, time: &TimeGrid, states: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (j, v) in states.iter().enumerate() {
        finite("state", v)?;
        for k in 0..grid.num_pipes() {
            for i in 0..=grid.cells[k] {
                w.serialize(StateRow {
                    t: time.t(j),
                    pipe: k + 1,
                    x: grid.x(k, i),
                    p: v[grid.p(k, i)],
                    q: v[grid.q(k, i)],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Adjoint states `𝐩(t_j)` in the layout of [`write_states`].
pub fn write_adjoint(path: &Path, grid: &Grid, time: &TimeGrid, adjoint: &AdjointTrajectory) -> Result<()> {
    write_states(path, grid, time, &adjoint.p)
}

/// Per-step solver diagnostics; `delta` is the last Picard contraction ratio.
pub fn write_diagnostics(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let delta = traj.ratios.last().copied().unwrap_or(0.0);
    for d in &traj.diagnostics {
        let row = DiagnosticsRow {
            t: d.t,
            picard_iters: traj.picard_iters,
            delta,
            kirchhoff_max: d.kirchhoff_max,
            rball_dist: d.rball_dist,
            box_margin: d.box_margin,
            continuity_max: d.continuity_max,
        };
        finite(
            "diagnostic",
            &[row.t, row.delta, row.kirchhoff_max, row.rball_dist, row.box_margin, row.continuity_max],
        )?;
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a control as rows `(t, slot, value)` with 1-based slots.
pub fn write_control(path: &Path, control: &ControlSignal) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (j, row) in control.values.iter().enumerate() {
        finite("control", row)?;
        for (s, &value) in row.iter().enumerate() {
            w.serialize(ControlRow {
                t: control.time.t(j),
                slot: s + 1,
                value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_iterations(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        finite("iteration", &[r.rho, r.cost, r.objective, r.grad_norm, r.step, r.box_margin])?;
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn time_index(time: &TimeGrid, t: f64) -> Result<usize> {
    let j = (t / time.tau()).round();
    if j < 0.0 || j > time.steps as f64 || (time.t(j as usize) - t).abs() > 1e-9 * time.horizon {
        return Err(GasnetError::Control(format!("time {t} is not on the scenario time grid")));
    }
    Ok(j as usize)
}

/// Reads a control CSV; every `(t_j, slot)` pair must appear exactly once.
pub fn read_control(path: &Path, time: TimeGrid, num_slots: usize) -> Result<ControlSignal> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut values = vec![vec![f64::NAN; num_slots]; time.steps + 1];
    let mut seen = 0;
    for row in rdr.deserialize() {
        let row: ControlRow = row?;
        let j = time_index(&time, row.t)?;
        if row.slot == 0 || row.slot > num_slots {
            return Err(GasnetError::Control(format!("slot {} out of range", row.slot)));
        }
        let cell = &mut values[j][row.slot - 1];
        if !cell.is_nan() {
            return Err(GasnetError::Control(format!("duplicate entry t = {}, slot {}", row.t, row.slot)));
        }
        *cell = row.value;
        seen += 1;
    }
    if seen != (time.steps + 1) * num_slots {
        return Err(GasnetError::Control(format!(
            "control file has {seen} entries, expected {}",
            (time.steps + 1) * num_slots
        )));
    }
    Ok(ControlSignal { time, values })
}

/// Reads a trajectory CSV in the format of [`write_states`].
pub fn read_states(path: &Path, grid: &Grid, time: &TimeGrid) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut states = vec![vec![f64::NAN; grid.len()]; time.steps + 1];
    let mut seen = 0;
    for row in rdr.deserialize() {
        let row: StateRow = row?;
        let j = time_index(time, row.t)?;
        if row.pipe == 0 || row.pipe > grid.num_pipes() {
            return Err(GasnetError::Control(format!("pipe {} out of range", row.pipe)));
        }
        let k = row.pipe - 1;
        let i = (row.x / grid.spacing[k]).round() as usize;
        if i > grid.cells[k] || (grid.x(k, i) - row.x).abs() > 1e-9 * grid.lengths[k] {
            return Err(GasnetError::Control(format!("x = {} is not a grid node of pipe {}", row.x, row.pipe)));
        }
        states[j][grid.p(k, i)] = row.p;
        states[j][grid.q(k, i)] = row.q;
        seen += 1;
    }
    if seen != (time.steps + 1) * grid.num_nodes() || states.iter().flatten().any(|v| v.is_nan()) {
        return Err(GasnetError::Control("trajectory file does not cover the grid and time steps".into()));
    }
    Ok(states)
}
