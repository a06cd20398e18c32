//! Closed-form equilibria on each pipe, their propagation through the tree,
//! and the box geometry used for state constraints.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{GasnetError, Result};
use crate::network::{classify_vertices, NetworkTopology, PipeParameters, VertexRole};

/// Below this magnitude of `gamma` the zero-inclination limit formula is used.
pub const GAMMA_SWITCH: f64 = 1e-8;

const CONSISTENCY_TOL: f64 = 1e-12;

/// Squared steady pressure at `x`; may be nonpositive.
fn radicand(pipe: &PipeParameters, p_in: f64, q: f64, x: f64) -> f64 {
    let (beta, gamma) = (pipe.beta(), pipe.gamma());
    if gamma.abs() < GAMMA_SWITCH {
        p_in * p_in - 2.0 * beta * q * q * x
    } else {
        (-2.0 * gamma * x).exp() * p_in * p_in + beta * q * q / gamma * (-2.0 * gamma * x).exp_m1()
    }
}

/// Position where the steady pressure would vanish, if any lies ahead.
fn critical_position(pipe: &PipeParameters, p_in: f64, q: f64) -> f64 {
    let (beta, gamma) = (pipe.beta(), pipe.gamma());
    let bq2 = beta * q * q;
    if bq2 == 0.0 {
        return 0.0;
    }
    if gamma.abs() < GAMMA_SWITCH {
        p_in * p_in / (2.0 * bq2)
    } else {
        (gamma * p_in * p_in / bq2).ln_1p() / (2.0 * gamma)
    }
}

/// Steady pressure `p_e(x)` on a pipe with inflow pressure `p_in` and flux `q`.
pub fn steady_pressure_profile(pipe: &PipeParameters, p_in: f64, q: f64, x: f64) -> Result<f64> {
    profile_named(pipe, "", p_in, q, x)
}

fn profile_named(pipe: &PipeParameters, id: &str, p_in: f64, q: f64, x: f64) -> Result<f64> {
    if !(p_in > 0.0) {
        return Err(GasnetError::SteadyState(format!(
            "inflow pressure must be positive, got {p_in}"
        )));
    }
    if !(0.0..=pipe.length * (1.0 + 1e-12)).contains(&x) {
        return Err(GasnetError::SteadyState(format!(
            "position {x} outside [0, {}]",
            pipe.length
        )));
    }
    let r = radicand(pipe, p_in, q, x);
    if !(r > 0.0) {
        return Err(GasnetError::SteadyStateBreach {
            pipe: id.to_string(),
            critical_x: critical_position(pipe, p_in, q),
        });
    }
    Ok(r.sqrt())
}

/// Inflow pressure that produces outflow pressure `p_out` at the pipe end.
pub fn inflow_pressure(pipe: &PipeParameters, p_out: f64, q: f64) -> f64 {
    let (beta, gamma, l) = (pipe.beta(), pipe.gamma(), pipe.length);
    let sq = if gamma.abs() < GAMMA_SWITCH {
        p_out * p_out + 2.0 * beta * q * q * l
    } else {
        (2.0 * gamma * l).exp() * p_out * p_out + beta * q * q * (2.0 * gamma * l).exp_m1() / gamma
    };
    sq.sqrt()
}

/// Boundary data defining an equilibrium.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadyStateData {
    /// Pressures at (a subset of) the entry vertices.
    pub entry_pressure: BTreeMap<String, f64>,
    /// Fluxes at the entry vertices.
    #[serde(default)]
    pub entry_flux: BTreeMap<String, f64>,
    /// Optional fixed fluxes per pipe id.
    #[serde(default)]
    pub flux_pins: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PipeEquilibrium {
    pub p_in: f64,
    pub q: f64,
    pub p_out: f64,
}

/// Per-pipe equilibrium: inflow pressure, constant flux and outflow pressure.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    pub pipes: Vec<PipeEquilibrium>,
    params: Vec<PipeParameters>,
}

impl SteadyState {
    /// Analytic pressure on pipe `k` at position `x`.
    pub fn pressure(&self, k: usize, x: f64) -> f64 {
        let e = &self.pipes[k];
        radicand(&self.params[k], e.p_in, e.q, x.clamp(0.0, self.params[k].length)).sqrt()
    }

    pub fn flux(&self, k: usize) -> f64 {
        self.pipes[k].q
    }

    pub fn params(&self, k: usize) -> &PipeParameters {
        &self.params[k]
    }
}

/// Propagates entry data through the tree to a Kirchhoff- and
/// continuity-consistent equilibrium with positive fluxes.
pub fn compute_steady_state(topology: &NetworkTopology, data: &SteadyStateData) -> Result<SteadyState> {
    let cls = classify_vertices(topology);
    let m = topology.num_pipes();
    let n = topology.num_vertices();

    let mut pins: Vec<Option<f64>> = vec![None; m];
    for (id, &q) in &data.flux_pins {
        let k = topology
            .pipe_index(id)
            .ok_or_else(|| GasnetError::SteadyState(format!("flux pin on unknown pipe {id}")))?;
        pins[k] = Some(q);
    }
    for id in data.entry_flux.keys().chain(data.entry_pressure.keys()) {
        match topology.vertex_index(id) {
            Some(v) if cls.roles[v] == VertexRole::Entry => {}
            _ => {
                return Err(GasnetError::SteadyState(format!("{id} is not an entry vertex")));
            }
        }
    }

    let mut flux: Vec<Option<f64>> = vec![None; m];
    for &v in &cls.entry {
        let k = cls.incident[v][0];
        let name = &topology.vertices[v];
        let given = data.entry_flux.get(name).copied();
        let q = match (given, pins[k]) {
            (Some(a), Some(b)) if (a - b).abs() > CONSISTENCY_TOL * a.abs().max(1.0) => {
                return Err(GasnetError::KirchhoffInfeasible(format!(
                    "{name} (entry flux {a} conflicts with pin {b})"
                )));
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => {
                return Err(GasnetError::SteadyState(format!("missing entry flux at {name}")));
            }
        };
        flux[k] = Some(q);
    }

    // Kahn order on the oriented tree: a vertex is processed once all pipes
    // ending there carry a flux.
    let mut pending: Vec<usize> = (0..n)
        .map(|v| cls.incident[v].iter().filter(|&&k| topology.pipes[k].to == v).count())
        .collect();
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| pending[v] == 0).collect();
    while let Some(v) = queue.pop_front() {
        let outgoing: Vec<usize> =
            cls.incident[v].iter().copied().filter(|&k| topology.pipes[k].from == v).collect();
        if cls.is_inner(v) {
            let name = &topology.vertices[v];
            let d2 = |k: usize| topology.pipes[k].params.diameter.powi(2);
            let inflow: f64 = cls.incident[v]
                .iter()
                .filter(|&&k| topology.pipes[k].to == v)
                .map(|&k| d2(k) * flux[k].expect("incoming flux resolved"))
                .sum();
            let pinned: f64 = outgoing.iter().filter_map(|&k| pins[k].map(|q| d2(k) * q)).sum();
            let free: Vec<usize> = outgoing.iter().copied().filter(|&k| pins[k].is_none()).collect();
            let rest = inflow - pinned;
            if free.is_empty() {
                if outgoing.is_empty() || (rest.abs() > CONSISTENCY_TOL * inflow.abs().max(1.0)) {
                    return Err(GasnetError::KirchhoffInfeasible(name.clone()));
                }
            } else if !(rest > 0.0) {
                return Err(GasnetError::KirchhoffInfeasible(format!(
                    "{name} (no positive split for remaining inflow {rest})"
                )));
            } else {
                let total: f64 = free.iter().map(|&k| d2(k)).sum();
                for &k in &free {
                    flux[k] = Some(rest / total);
                }
            }
            for &k in &outgoing {
                if let Some(q) = pins[k] {
                    flux[k] = Some(q);
                }
            }
        }
        for &k in &outgoing {
            let w = topology.pipes[k].to;
            pending[w] -= 1;
            if pending[w] == 0 {
                queue.push_back(w);
            }
        }
    }
    let flux: Vec<f64> = flux
        .into_iter()
        .enumerate()
        .map(|(k, q)| {
            q.ok_or_else(|| {
                GasnetError::SteadyState(format!("flux of pipe {} undetermined", topology.pipes[k].id))
            })
        })
        .collect::<Result<_>>()?;
    for (k, &q) in flux.iter().enumerate() {
        if !(q > 0.0) {
            return Err(GasnetError::SteadyState(format!(
                "nonpositive flux {q} on pipe {}",
                topology.pipes[k].id
            )));
        }
    }

    // Pressures: breadth-first over the undirected tree from one given entry.
    let mut given: Vec<Option<f64>> = vec![None; n];
    for (id, &p) in &data.entry_pressure {
        if !(p > 0.0) {
            return Err(GasnetError::SteadyState(format!("entry pressure at {id} must be positive")));
        }
        given[topology.vertex_index(id).expect("checked above")] = Some(p);
    }
    let root = given
        .iter()
        .position(Option::is_some)
        .ok_or_else(|| GasnetError::SteadyState("at least one entry pressure is required".into()))?;
    let mut pressure: Vec<Option<f64>> = vec![None; n];
    pressure[root] = given[root];
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let pv = pressure[v].expect("queued vertices carry a pressure");
        for &k in &cls.incident[v] {
            let pipe = &topology.pipes[k];
            let (w, pw) = if pipe.from == v {
                let p_out = profile_named(&pipe.params, &pipe.id, pv, flux[k], pipe.params.length)?;
                (pipe.to, p_out)
            } else {
                (pipe.from, inflow_pressure(&pipe.params, pv, flux[k]))
            };
            if pressure[w].is_none() {
                if let Some(pg) = given[w] {
                    if (pg - pw).abs() > CONSISTENCY_TOL * pg.abs() {
                        return Err(GasnetError::PressureInfeasible {
                            node: topology.vertices[w].clone(),
                            left: pw,
                            right: pg,
                        });
                    }
                }
                pressure[w] = Some(given[w].unwrap_or(pw));
                queue.push_back(w);
            }
        }
    }

    let mut pipes = Vec::with_capacity(m);
    for (k, pipe) in topology.pipes.iter().enumerate() {
        let p_in = pressure[pipe.from].expect("tree is connected");
        let q = flux[k];
        let p_out = profile_named(&pipe.params, &pipe.id, p_in, q, pipe.params.length)?;
        if !(pipe.params.gamma() * p_in * p_in + pipe.params.beta() * q * q > 0.0) {
            return Err(GasnetError::SteadyState(format!(
                "pressure on pipe {} is not strictly decreasing",
                pipe.id
            )));
        }
        pipes.push(PipeEquilibrium { p_in, q, p_out });
    }
    Ok(SteadyState {
        pipes,
        params: topology.pipes.iter().map(|p| p.params).collect(),
    })
}

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Interval {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeBox {
    pub p: Interval,
    pub q: Interval,
}

/// Per-pipe pressure and flux intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBox {
    pub pipes: Vec<PipeBox>,
}

impl StateBox {
    pub fn uniform(m: usize, p: Interval, q: Interval) -> Self {
        Self {
            pipes: vec![PipeBox { p, q }; m],
        }
    }

    /// Builds the box from a map keyed by pipe id; every pipe must be present.
    pub fn from_map(topology: &NetworkTopology, map: &BTreeMap<String, PipeBox>) -> Result<Self> {
        for id in map.keys() {
            if topology.pipe_index(id).is_none() {
                return Err(GasnetError::StateBox(format!("unknown pipe {id}")));
            }
        }
        let pipes = topology
            .pipes
            .iter()
            .map(|p| {
                map.get(&p.id)
                    .copied()
                    .ok_or_else(|| GasnetError::StateBox(format!("missing box for pipe {}", p.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { pipes })
    }

    /// Smallest pressure lower bound.
    pub fn min_pressure(&self) -> f64 {
        self.pipes.iter().map(|b| b.p.lo).fold(f64::INFINITY, f64::min)
    }
}

/// Outcome of [`validate_suitable_set`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuitabilityReport {
    pub violations: Vec<String>,
    /// Smallest distance of the equilibrium to a box face.
    pub margin: f64,
}

impl SuitabilityReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<f64> {
        if self.is_valid() {
            Ok(self.margin)
        } else {
            Err(GasnetError::StateBox(self.violations.join("; ")))
        }
    }
}

/// Checks the suitable-set inequalities and interiority of the equilibrium.
pub fn validate_suitable_set(state_box: &StateBox, v_e: &SteadyState) -> SuitabilityReport {
    let mut violations = Vec::new();
    if state_box.pipes.len() != v_e.pipes.len() {
        violations.push(format!(
            "box has {} pipes, equilibrium has {}",
            state_box.pipes.len(),
            v_e.pipes.len()
        ));
        return SuitabilityReport {
            violations,
            margin: f64::NAN,
        };
    }
    let mut margin = f64::INFINITY;
    for (k, (b, e)) in state_box.pipes.iter().zip(&v_e.pipes).enumerate() {
        let pipe = k + 1;
        if !(b.p.lo > 0.0) {
            violations.push(format!("pipe {pipe}: pressure lower bound must be positive"));
        }
        if !(b.p.lo < b.p.hi) {
            violations.push(format!("pipe {pipe}: empty pressure interval"));
        }
        if !(b.q.lo < b.q.hi) {
            violations.push(format!("pipe {pipe}: empty flux interval"));
        }
        if b.p.lo + e.p_in > b.p.hi {
            violations.push(format!("pipe {pipe}: a + p_in exceeds b"));
        }
        // the profile is monotone, so its range is [p_out, p_in]
        let m = (e.p_out - b.p.lo)
            .min(b.p.hi - e.p_in)
            .min(e.q - b.q.lo)
            .min(b.q.hi - e.q);
        if !(m > 0.0) {
            violations.push(format!("pipe {pipe}: equilibrium not interior"));
        }
        margin = margin.min(m);
    }
    SuitabilityReport { violations, margin }
}

/// Sup-norm gap between an inner box and an enclosing box.
pub fn ball_radius(inner: &StateBox, outer: &StateBox) -> Result<f64> {
    if inner.pipes.len() != outer.pipes.len() {
        return Err(GasnetError::ShapeMismatch {
            expected: outer.pipes.len(),
            got: inner.pipes.len(),
        });
    }
    let mut r = f64::INFINITY;
    for (k, (i, o)) in inner.pipes.iter().zip(&outer.pipes).enumerate() {
        let gaps = [i.p.lo - o.p.lo, o.p.hi - i.p.hi, i.q.lo - o.q.lo, o.q.hi - i.q.hi];
        if gaps.iter().any(|&g| g < 0.0) {
            return Err(GasnetError::StateBox(format!(
                "inner box not contained in outer box on pipe {}",
                k + 1
            )));
        }
        r = gaps.iter().copied().fold(r, f64::min);
    }
    Ok(r)
}
