//! Spatial discretization: grids, the weighted inner product, the coupled
//! transport operator with its junction constraints, the boundary lifting
//! and forcing, and the friction nonlinearity with its Jacobian.
//!
//! State vectors interleave pressure and flux node by node, pipe after pipe:
//! entry `2 (offset_k + i)` is `p^k(x_i)` and the next one is `q^k(x_i)`.
//!
//! The first derivative is the second-order summation-by-parts operator
//! `D = H⁻¹Q` whose norm `H` is the trapezoid rule. With this pairing the
//! energy identity telescopes exactly to the pipe ends, where the junction
//! constraints enforced by the projector cancel it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GasnetError, Result};
use crate::linalg::{BandLu, BandMatrix};
use crate::network::{classify_vertices, NetworkTopology, VertexRole};
use crate::steady_state::{StateBox, SteadyState};

/// Minimum number of cells per pipe.
pub const MIN_CELLS: usize = 4;

const BAND: usize = 3;

/// Spatial resolution of the pipe grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Cells per meter; each pipe gets `round(rate * L_k)` cells.
    NodesPerMeter(f64),
    /// Explicit cell counts in pipe order.
    PerPipe(Vec<usize>),
}

/// Uniform grids on every pipe with trapezoid weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    /// Cell counts `N_k`.
    pub cells: Vec<usize>,
    pub lengths: Vec<f64>,
    pub spacing: Vec<f64>,
    offsets: Vec<usize>,
    nodes: usize,
}

pub fn build_grid(topology: &NetworkTopology, resolution: &Resolution) -> Result<Grid> {
    let lengths: Vec<f64> = topology.pipes.iter().map(|p| p.params.length).collect();
    let cells: Vec<usize> = match resolution {
        Resolution::NodesPerMeter(rate) => {
            if !(rate.is_finite() && *rate > 0.0) {
                return Err(GasnetError::Resolution(format!("invalid nodes per meter {rate}")));
            }
            lengths.iter().map(|l| (rate * l).round() as usize).collect()
        }
        Resolution::PerPipe(n) => {
            if n.len() != lengths.len() {
                return Err(GasnetError::ShapeMismatch {
                    expected: lengths.len(),
                    got: n.len(),
                });
            }
            n.clone()
        }
    };
    Grid::new(lengths, cells)
}

impl Grid {
    pub fn new(lengths: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        for (k, &n) in cells.iter().enumerate() {
            if n < MIN_CELLS {
                return Err(GasnetError::Resolution(format!(
                    "pipe {} has {n} cells, at least {MIN_CELLS} required",
                    k + 1
                )));
            }
        }
        let mut offsets = Vec::with_capacity(cells.len());
        let mut nodes = 0;
        for &n in &cells {
            offsets.push(nodes);
            nodes += n + 1;
        }
        let spacing = lengths.iter().zip(&cells).map(|(l, &n)| l / n as f64).collect();
        Ok(Self {
            cells,
            lengths,
            spacing,
            offsets,
            nodes,
        })
    }

    pub fn num_pipes(&self) -> usize {
        self.cells.len()
    }

    /// Total number of grid nodes over all pipes.
    pub fn num_nodes(&self) -> usize {
        self.nodes
    }

    /// Length of a state vector.
    pub fn len(&self) -> usize {
        2 * self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes == 0
    }

    /// Global node number of node `i` on pipe `k`.
    #[inline]
    pub fn node(&self, k: usize, i: usize) -> usize {
        self.offsets[k] + i
    }

    /// Index of the pressure sample at node `i` of pipe `k`.
    #[inline]
    pub fn p(&self, k: usize, i: usize) -> usize {
        2 * (self.offsets[k] + i)
    }

    /// Index of the flux sample at node `i` of pipe `k`.
    #[inline]
    pub fn q(&self, k: usize, i: usize) -> usize {
        2 * (self.offsets[k] + i) + 1
    }

    /// Range of state entries belonging to pipe `k`.
    pub fn pipe_range(&self, k: usize) -> std::ops::Range<usize> {
        2 * self.offsets[k]..2 * (self.offsets[k] + self.cells[k] + 1)
    }

    pub fn x(&self, k: usize, i: usize) -> f64 {
        self.lengths[k] * i as f64 / self.cells[k] as f64
    }

    /// Trapezoid weight of node `i` on pipe `k`.
    pub fn weight(&self, k: usize, i: usize) -> f64 {
        let h = self.spacing[k];
        if i == 0 || i == self.cells[k] {
            0.5 * h
        } else {
            h
        }
    }

    /// Pipe and local node of a global node number.
    pub fn locate(&self, node: usize) -> (usize, usize) {
        let k = self.offsets.partition_point(|&o| o <= node) - 1;
        (k, node - self.offsets[k])
    }

    /// Coefficients of row `i` of the first-derivative operator on pipe `k`.
    fn derivative_row(&self, k: usize, i: usize) -> [(usize, f64); 2] {
        let n = self.cells[k];
        let h = self.spacing[k];
        if i == 0 {
            [(0, -1.0 / h), (1, 1.0 / h)]
        } else if i == n {
            [(n - 1, -1.0 / h), (n, 1.0 / h)]
        } else {
            [(i - 1, -0.5 / h), (i + 1, 0.5 / h)]
        }
    }
}

/// Network state sampled on a [`Grid`] at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub t: f64,
    pub data: Vec<f64>,
}

impl NetworkState {
    pub fn zeros(grid: &Grid, t: f64) -> Self {
        Self {
            t,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: &Grid, t: f64, f: impl Fn(usize, f64) -> (f64, f64)) -> Self {
        let mut data = vec![0.0; grid.len()];
        for k in 0..grid.num_pipes() {
            for i in 0..=grid.cells[k] {
                let (p, q) = f(k, grid.x(k, i));
                data[grid.p(k, i)] = p;
                data[grid.q(k, i)] = q;
            }
        }
        Self { t, data }
    }

    pub fn pressure(&self, grid: &Grid, k: usize, i: usize) -> f64 {
        self.data[grid.p(k, i)]
    }

    pub fn flux(&self, grid: &Grid, k: usize, i: usize) -> f64 {
        self.data[grid.q(k, i)]
    }
}

/// Pipe end attached to a vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipeEnd {
    pub pipe: usize,
    /// Local node index (0 or `N_k`).
    pub node: usize,
    /// Incidence sign: −1 at the pipe start, +1 at its end.
    pub xi: i8,
}

/// Inner vertex with the pipe ends meeting there.
#[derive(Clone, Debug, PartialEq)]
pub struct Junction {
    pub vertex: usize,
    pub ends: Vec<PipeEnd>,
}

/// Friction Jacobian per global node: the second row `[a, b]` of the 2×2
/// block, the first row being zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeJacobian {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Which parts of `Ã + P + 𝔉` enter a generator.
#[derive(Clone, Copy, Debug)]
pub struct Generator<'a> {
    pub transport: bool,
    pub source: bool,
    pub jacobian: Option<&'a NodeJacobian>,
    /// Use the M-adjoint `M⁻¹KᵀM` instead of `K`.
    pub adjoint: bool,
}

impl<'a> Generator<'a> {
    /// `Ã + P`.
    pub fn linear() -> Self {
        Self {
            transport: true,
            source: true,
            jacobian: None,
            adjoint: false,
        }
    }

    pub fn with_jacobian(jacobian: &'a NodeJacobian) -> Self {
        Self {
            jacobian: Some(jacobian),
            ..Self::linear()
        }
    }

    pub fn adjoint(self) -> Self {
        Self {
            adjoint: true,
            ..self
        }
    }
}

/// Assembled spatial operators on a network grid.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub grid: Grid,
    pub sound_speed: f64,
    pub diameter_sq: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Diagonal of the weighted mass matrix.
    pub mass: Vec<f64>,
    /// Whether each of the `2m` control slots may carry data.
    pub active_slots: Vec<bool>,
    pub junctions: Vec<Junction>,
    /// Pipe ends at entry vertices (pressure prescribed).
    pub entries: Vec<usize>,
    /// Pipe ends at exit vertices (flux prescribed).
    pub exits: Vec<usize>,
    /// Pressure floor below which the nonlinearity refuses to evaluate.
    pub pressure_floor: f64,
    constraints: Vec<Vec<(usize, f64)>>,
    schur_inv: DMatrix<f64>,
    corruption: f64,
}

/// Assembles the transport operator, source, mass and constraint projector.
pub fn assemble_transport_operator(topology: &NetworkTopology, grid: &Grid) -> Result<DiscreteOperator> {
    DiscreteOperator::assemble(topology, grid)
}

impl DiscreteOperator {
    pub fn assemble(topology: &NetworkTopology, grid: &Grid) -> Result<Self> {
        if grid.num_pipes() != topology.num_pipes() {
            return Err(GasnetError::ShapeMismatch {
                expected: topology.num_pipes(),
                got: grid.num_pipes(),
            });
        }
        let cls = classify_vertices(topology);
        let c = topology.constants.c;
        let diameter_sq: Vec<f64> = topology.pipes.iter().map(|p| p.params.diameter.powi(2)).collect();
        let mut mass = vec![0.0; grid.len()];
        for k in 0..grid.num_pipes() {
            for i in 0..=grid.cells[k] {
                let w = diameter_sq[k] * grid.weight(k, i);
                mass[grid.p(k, i)] = w;
                mass[grid.q(k, i)] = w * c * c;
            }
        }

        let mut active_slots = vec![false; 2 * topology.num_pipes()];
        let mut entries = Vec::new();
        let mut exits = Vec::new();
        let mut junctions = Vec::new();
        let mut constraints: Vec<Vec<(usize, f64)>> = Vec::new();
        for v in 0..topology.num_vertices() {
            match cls.roles[v] {
                VertexRole::Entry => {
                    let k = cls.incident[v][0];
                    active_slots[2 * k] = true;
                    entries.push(k);
                    constraints.push(vec![(grid.p(k, 0), 1.0)]);
                }
                VertexRole::Exit => {
                    let k = cls.incident[v][0];
                    active_slots[2 * k + 1] = true;
                    exits.push(k);
                    constraints.push(vec![(grid.q(k, grid.cells[k]), 1.0)]);
                }
                VertexRole::Inner => {
                    let ends: Vec<PipeEnd> = cls.incident[v]
                        .iter()
                        .map(|&k| {
                            let xi = cls.xi(k, v);
                            PipeEnd {
                                pipe: k,
                                node: if xi < 0 { 0 } else { grid.cells[k] },
                                xi,
                            }
                        })
                        .collect();
                    let first = ends[0];
                    for e in &ends[1..] {
                        constraints.push(vec![
                            (grid.p(first.pipe, first.node), 1.0),
                            (grid.p(e.pipe, e.node), -1.0),
                        ]);
                    }
                    constraints.push(
                        ends.iter()
                            .map(|e| (grid.q(e.pipe, e.node), e.xi as f64 * diameter_sq[e.pipe]))
                            .collect(),
                    );
                    junctions.push(Junction { vertex: v, ends });
                }
            }
        }
        let schur_inv = schur_inverse(&constraints, &mass)?;
        Ok(Self {
            grid: grid.clone(),
            sound_speed: c,
            diameter_sq,
            beta: topology.pipes.iter().map(|p| p.params.beta()).collect(),
            gamma: topology.pipes.iter().map(|p| p.params.gamma()).collect(),
            mass,
            active_slots,
            junctions,
            entries,
            exits,
            pressure_floor: 0.0,
            constraints,
            schur_inv,
            corruption: 0.0,
        })
    }

    /// Sets the floor used by the vacuum guard.
    pub fn with_pressure_floor(mut self, floor: f64) -> Self {
        self.pressure_floor = floor;
        self
    }

    /// Test hook: perturbs one interior row of the transport operator so that
    /// it is no longer skew on the constrained space.
    pub fn corrupted(mut self, amount: f64) -> Self {
        self.corruption = amount;
        self
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn num_pipes(&self) -> usize {
        self.grid.num_pipes()
    }

    pub fn num_slots(&self) -> usize {
        self.active_slots.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    fn pipe_of(&self, idx: usize) -> usize {
        self.grid.locate(idx / 2).0
    }

    /// Weighted inner product `(u, v)_M`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.mass.len());
        debug_assert_eq!(v.len(), self.mass.len());
        self.mass.iter().zip(u).zip(v).map(|((m, a), b)| m * a * b).sum()
    }

    pub fn norm(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }

    /// Constraint residuals `C x`.
    pub fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|row| row.iter().map(|&(j, c)| c * x[j]).sum())
            .collect()
    }

    /// `M⁻¹ Cᵀ μ` added to `out`.
    fn add_constraint_forces(&self, mu: &[f64], out: &mut [f64]) {
        for (row, &m) in self.constraints.iter().zip(mu) {
            for &(j, c) in row {
                out[j] += c * m / self.mass[j];
            }
        }
    }

    /// M-orthogonal projection onto the constrained space.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        let cx = DVector::from_vec(self.constraint_values(x));
        let mu = -(&self.schur_inv * cx);
        self.add_constraint_forces(mu.as_slice(), x);
    }

    /// `Ã z = (−c² D q, −D p)` on every pipe, without constraints.
    pub fn apply_transport(&self, z: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let c2 = self.sound_speed * self.sound_speed;
        for k in 0..g.num_pipes() {
            for i in 0..=g.cells[k] {
                let (mut dp, mut dq) = (0.0, 0.0);
                for (j, w) in g.derivative_row(k, i) {
                    dp += w * z[g.p(k, j)];
                    dq += w * z[g.q(k, j)];
                }
                let skew = if self.corruption != 0.0 && k == 0 && i == 1 {
                    1.0 + self.corruption
                } else {
                    1.0
                };
                out[g.p(k, i)] = -c2 * dq * skew;
                out[g.q(k, i)] = -dp;
            }
        }
    }

    /// Constrained skew form `Π Ã Π z`.
    pub fn apply_skew(&self, z: &[f64]) -> Vec<f64> {
        let pz = self.project(z);
        let mut out = vec![0.0; z.len()];
        self.apply_transport(&pz, &mut out);
        self.project_in_place(&mut out);
        out
    }

    /// `P z = (0, −γ p)`.
    pub fn apply_source(&self, z: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        for k in 0..g.num_pipes() {
            for i in 0..=g.cells[k] {
                out[g.p(k, i)] = 0.0;
                out[g.q(k, i)] = -self.gamma[k] * z[g.p(k, i)];
            }
        }
    }

    /// Operator norm of `P` in the weighted norm.
    pub fn source_norm(&self) -> f64 {
        self.gamma.iter().fold(0.0f64, |m, g| m.max(g.abs())) * self.sound_speed
    }

    fn check_slots(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.num_slots() {
            return Err(GasnetError::ShapeMismatch {
                expected: self.num_slots(),
                got: phi.len(),
            });
        }
        for (s, (&v, &active)) in phi.iter().zip(&self.active_slots).enumerate() {
            if !active && v != 0.0 {
                return Err(GasnetError::Control(format!(
                    "slot {} is not attached to a boundary vertex but carries {v}",
                    s + 1
                )));
            }
        }
        Ok(())
    }

    /// Affine-in-x lifting of boundary data into the pipes.
    pub fn lift_boundary(&self, phi: &[f64]) -> Result<Vec<f64>> {
        self.check_slots(phi)?;
        let mut out = vec![0.0; self.len()];
        self.lift_into(phi, &mut out);
        Ok(out)
    }

    pub(crate) fn lift_into(&self, phi: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        for k in 0..g.num_pipes() {
            let n = g.cells[k] as f64;
            for i in 0..=g.cells[k] {
                let s = i as f64 / n;
                out[g.p(k, i)] = (1.0 - s) * phi[2 * k];
                out[g.q(k, i)] = s * phi[2 * k + 1];
            }
        }
    }

    /// The constant-in-x field `B₀ φ` on every pipe.
    pub(crate) fn b0_into(&self, phi: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let c2 = self.sound_speed * self.sound_speed;
        for k in 0..g.num_pipes() {
            let l = g.lengths[k];
            for i in 0..=g.cells[k] {
                out[g.p(k, i)] = -c2 / l * phi[2 * k + 1];
                out[g.q(k, i)] = phi[2 * k] / l;
            }
        }
    }

    /// `B₀ φ + P B₁ φ − B₁ φ'`.
    pub fn boundary_forcing(&self, phi: &[f64], phi_dot: &[f64]) -> Result<Vec<f64>> {
        self.check_slots(phi)?;
        self.check_slots(phi_dot)?;
        let mut out = vec![0.0; self.len()];
        self.forcing_into(phi, phi_dot, &mut out);
        Ok(out)
    }

    pub(crate) fn forcing_into(&self, phi: &[f64], phi_dot: &[f64], out: &mut [f64]) {
        let n = self.len();
        let mut lift = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.b0_into(phi, out);
        self.lift_into(phi, &mut lift);
        self.apply_source(&lift, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
        self.lift_into(phi_dot, &mut lift);
        for (o, l) in out.iter_mut().zip(&lift) {
            *o -= l;
        }
    }

    fn guard(&self, v: &[f64], idx: usize) -> Result<f64> {
        let p = v[idx];
        if !(p >= self.pressure_floor && p > 0.0) {
            let (k, i) = self.grid.locate(idx / 2);
            return Err(GasnetError::VacuumGuard {
                pipe: k + 1,
                node: i,
                pressure: p,
                floor: self.pressure_floor,
            });
        }
        Ok(p)
    }

    /// Friction term `(0, −β q|q|/p)`.
    pub fn nonlinearity(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; v.len()];
        self.nonlinearity_into(v, &mut out)?;
        Ok(out)
    }

    pub(crate) fn nonlinearity_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        let g = &self.grid;
        for k in 0..g.num_pipes() {
            let beta = self.beta[k];
            for i in 0..=g.cells[k] {
                let p = self.guard(v, g.p(k, i))?;
                let q = v[g.q(k, i)];
                out[g.p(k, i)] = 0.0;
                out[g.q(k, i)] = -beta * q * q.abs() / p;
            }
        }
        Ok(())
    }

    /// Per-node Jacobian of the friction term at `v`.
    pub fn jacobian(&self, v: &[f64]) -> Result<NodeJacobian> {
        let g = &self.grid;
        let mut a = vec![0.0; g.num_nodes()];
        let mut b = vec![0.0; g.num_nodes()];
        for k in 0..g.num_pipes() {
            let beta = self.beta[k];
            for i in 0..=g.cells[k] {
                let p = self.guard(v, g.p(k, i))?;
                let q = v[g.q(k, i)];
                let node = g.node(k, i);
                a[node] = beta * q * q.abs() / (p * p);
                b[node] = -2.0 * beta * q.abs() / p;
            }
        }
        Ok(NodeJacobian { a, b })
    }

    /// `𝔉 u`.
    pub fn apply_jacobian(&self, jac: &NodeJacobian, u: &[f64], out: &mut [f64]) {
        for n in 0..self.grid.num_nodes() {
            out[2 * n] = 0.0;
            out[2 * n + 1] = jac.a[n] * u[2 * n] + jac.b[n] * u[2 * n + 1];
        }
    }

    /// M-adjoint `𝔉□ u = (c² a u_q, b u_q)`.
    pub fn apply_jacobian_adjoint(&self, jac: &NodeJacobian, u: &[f64], out: &mut [f64]) {
        let c2 = self.sound_speed * self.sound_speed;
        for n in 0..self.grid.num_nodes() {
            out[2 * n] = c2 * jac.a[n] * u[2 * n + 1];
            out[2 * n + 1] = jac.b[n] * u[2 * n + 1];
        }
    }

    /// Lipschitz constant of the friction term on box-valued states.
    pub fn lipschitz_bound(&self, state_box: &StateBox) -> f64 {
        let c = self.sound_speed;
        state_box
            .pipes
            .iter()
            .zip(&self.beta)
            .map(|(b, beta)| {
                let qmax = b.q.lo.abs().max(b.q.hi.abs());
                let a = b.p.lo;
                let dq = 2.0 * beta * qmax / a;
                let dp = beta * qmax * qmax / (a * a);
                (dq * dq + c * c * dp * dp).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Weighted discrete H¹ norm `(‖z‖²_M + ‖D z‖²_M)^½`.
    pub fn h1_norm(&self, z: &[f64]) -> f64 {
        let g = &self.grid;
        let mut dz = vec![0.0; z.len()];
        for k in 0..g.num_pipes() {
            for i in 0..=g.cells[k] {
                for (j, w) in g.derivative_row(k, i) {
                    dz[g.p(k, i)] += w * z[g.p(k, j)];
                    dz[g.q(k, i)] += w * z[g.q(k, j)];
                }
            }
        }
        (self.inner(z, z) + self.inner(&dz, &dz)).sqrt()
    }

    /// Samples the analytic equilibrium on the grid.
    pub fn sample_steady(&self, ss: &SteadyState) -> Vec<f64> {
        NetworkState::from_fn(&self.grid, 0.0, |k, x| (ss.pressure(k, x), ss.flux(k))).data
    }

    /// Generator band of pipe `k` in local interleaved numbering.
    fn generator_band(&self, k: usize, gen: &Generator) -> BandMatrix {
        let g = &self.grid;
        let n = g.cells[k];
        let dim = 2 * (n + 1);
        let c2 = self.sound_speed * self.sound_speed;
        let mut band = BandMatrix::zeros(dim, BAND, BAND);
        for i in 0..=n {
            if gen.transport {
                let skew = if self.corruption != 0.0 && k == 0 && i == 1 {
                    1.0 + self.corruption
                } else {
                    1.0
                };
                for (j, w) in g.derivative_row(k, i) {
                    band.add(2 * i, 2 * j + 1, -c2 * w * skew);
                    band.add(2 * i + 1, 2 * j, -w);
                }
            }
            if gen.source {
                band.add(2 * i + 1, 2 * i, -self.gamma[k]);
            }
            if let Some(jac) = gen.jacobian {
                let node = g.node(k, i);
                band.add(2 * i + 1, 2 * i, jac.a[node]);
                band.add(2 * i + 1, 2 * i + 1, jac.b[node]);
            }
        }
        if gen.adjoint {
            band.weighted_transpose(&self.mass[g.pipe_range(k)])
        } else {
            band
        }
    }

    /// `out = K x` for the generator `K`.
    pub fn apply_generator(&self, gen: &Generator, x: &[f64], out: &mut [f64]) {
        for k in 0..self.num_pipes() {
            let r = self.grid.pipe_range(k);
            self.generator_band(k, gen).matvec(&x[r.clone()], &mut out[r]);
        }
    }

    /// Prepares solves of `Π(I − θK) x = Π b` for `x` in the constrained space.
    pub fn implicit_solver(&self, theta: f64, gen: &Generator) -> Result<ConstrainedSolver> {
        let mut lus = Vec::with_capacity(self.num_pipes());
        let mut bands = Vec::with_capacity(self.num_pipes());
        for k in 0..self.num_pipes() {
            let band = self.generator_band(k, gen);
            let lu = band.shifted(1.0, -theta).factor().ok_or_else(|| {
                GasnetError::Assembly(format!("singular step matrix on pipe {}", k + 1))
            })?;
            lus.push(lu);
            bands.push(band);
        }
        let n = self.len();
        let nc = self.constraints.len();
        let mut z = Vec::with_capacity(nc);
        for row in &self.constraints {
            let mut col = vec![0.0; n];
            for &(j, c) in row {
                col[j] = c / self.mass[j];
            }
            let mut touched: Vec<usize> = row.iter().map(|&(j, _)| self.pipe_of(j)).collect();
            touched.sort_unstable();
            touched.dedup();
            for k in touched {
                let r = self.grid.pipe_range(k);
                lus[k].solve_in_place(&mut col[r]);
            }
            z.push(col);
        }
        let schur = DMatrix::from_fn(nc, nc, |i, j| {
            self.constraints[i].iter().map(|&(idx, c)| c * z[j][idx]).sum()
        });
        let schur = schur.lu();
        if !schur.is_invertible() {
            return Err(GasnetError::Assembly("singular bordered step system".into()));
        }
        Ok(ConstrainedSolver {
            grid: self.grid.clone(),
            lus,
            bands,
            z,
            schur,
            constraints: self.constraints.clone(),
        })
    }

    /// Stationary residual `(Ã + P) v + F(v)`.
    pub fn stationary_residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut out = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.apply_transport(v, &mut out);
        self.apply_source(v, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
        self.nonlinearity_into(v, &mut tmp)?;
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
        Ok(out)
    }

    /// Discrete equilibrium: solves `Π[(Ã + P) v + F(v)] = 0` with the
    /// boundary values and junction conditions of `guess` by Newton's method.
    pub fn discrete_equilibrium(&self, guess: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let nc = self.constraints.len();
        let target = self.constraint_values(guess);
        let mut v = guess.to_vec();
        let scale = self.norm(guess).max(1.0);
        for _ in 0..30 {
            let res = self.stationary_residual(&v)?;
            let pres = self.project(&res);
            let cres: Vec<f64> = self
                .constraint_values(&v)
                .iter()
                .zip(&target)
                .map(|(a, b)| a - b)
                .collect();
            let cnorm = cres.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if self.norm(&pres) <= 1e-14 * scale && cnorm <= 1e-14 * scale {
                return Ok(v);
            }
            let jac = self.jacobian(&v)?;
            let gen = Generator::with_jacobian(&jac);
            let mut a = DMatrix::<f64>::zeros(n + nc, n + nc);
            for k in 0..self.num_pipes() {
                let r = self.grid.pipe_range(k);
                let band = self.generator_band(k, &gen);
                for i in 0..r.len() {
                    for j in i.saturating_sub(BAND)..(i + BAND + 1).min(r.len()) {
                        a[(r.start + i, r.start + j)] = band.get(i, j);
                    }
                }
            }
            for (c, row) in self.constraints.iter().enumerate() {
                for &(j, w) in row {
                    a[(j, n + c)] = -w / self.mass[j];
                    a[(n + c, j)] = w;
                }
            }
            let mut rhs = DVector::<f64>::zeros(n + nc);
            for i in 0..n {
                rhs[i] = -res[i];
            }
            for c in 0..nc {
                rhs[n + c] = -cres[c];
            }
            let step = a
                .lu()
                .solve(&rhs)
                .ok_or_else(|| GasnetError::SteadyState("singular discrete equilibrium system".into()))?;
            let mut delta = 0.0f64;
            for i in 0..n {
                v[i] += step[i];
                delta = delta.max(step[i].abs());
            }
            if delta <= 1e-15 * scale {
                return Ok(v);
            }
        }
        Err(GasnetError::SteadyState("discrete equilibrium did not converge".into()))
    }
}

fn schur_inverse(constraints: &[Vec<(usize, f64)>], mass: &[f64]) -> Result<DMatrix<f64>> {
    let nc = constraints.len();
    let s = DMatrix::from_fn(nc, nc, |i, j| {
        constraints[i]
            .iter()
            .map(|&(a, ca)| {
                constraints[j]
                    .iter()
                    .filter(|&&(b, _)| b == a)
                    .map(|&(_, cb)| ca * cb / mass[a])
                    .sum::<f64>()
            })
            .sum()
    });
    let scale: f64 = s.amax();
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| GasnetError::Assembly("singular constraint assembly (dependent constraints)".into()))?;
    let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    if min_pivot * min_pivot <= 1e-12 * scale {
        return Err(GasnetError::Assembly(
            "singular constraint assembly (dependent constraints)".into(),
        ));
    }
    Ok(chol.inverse())
}

/// Factorized bordered system for one implicit step.
#[derive(Clone, Debug)]
pub struct ConstrainedSolver {
    grid: Grid,
    lus: Vec<BandLu>,
    bands: Vec<BandMatrix>,
    z: Vec<Vec<f64>>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    constraints: Vec<Vec<(usize, f64)>>,
}

impl ConstrainedSolver {
    /// Solves `Π(I − θK) x = Π b`, `x` in the constrained space.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = b.to_vec();
        for (k, lu) in self.lus.iter().enumerate() {
            lu.solve_in_place(&mut y[self.grid.pipe_range(k)]);
        }
        let cy = DVector::from_iterator(
            self.constraints.len(),
            self.constraints.iter().map(|row| -row.iter().map(|&(j, c)| c * y[j]).sum::<f64>()),
        );
        let mu = self.schur.solve(&cy).expect("checked invertible");
        for (col, m) in self.z.iter().zip(mu.iter()) {
            for (yi, zi) in y.iter_mut().zip(col) {
                *yi += zi * m;
            }
        }
        y
    }

    /// `out = K x` with the generator used to build the solver.
    pub fn apply_generator(&self, x: &[f64], out: &mut [f64]) {
        for (k, band) in self.bands.iter().enumerate() {
            let r = self.grid.pipe_range(k);
            band.matvec(&x[r.clone()], &mut out[r]);
        }
    }
}

/// Checked weighted inner product of two network states.
pub fn weighted_inner_product(op: &DiscreteOperator, u: &NetworkState, v: &NetworkState) -> Result<f64> {
    for s in [u, v] {
        if s.data.len() != op.len() {
            return Err(GasnetError::ShapeMismatch {
                expected: op.len(),
                got: s.data.len(),
            });
        }
    }
    Ok(op.inner(&u.data, &v.data))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::network::parse_network;
    use crate::steady_state::Interval;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn single_pipe(c: f64, d: f64, friction: f64, inclination: f64) -> NetworkTopology {
        parse_network(&format!(
            "vertices = [\"v1\", \"v2\"]\n[constants]\nc = {c:?}\ng = 9.81\n[[pipes]]\nid = \"e1\"\nfrom = \"v1\"\nto = \"v2\"\nlength = 1.0\ndiameter = {d:?}\nfriction = {friction:?}\ninclination = {inclination:?}\n"
        ))
        .unwrap()
    }

    pub(crate) fn figure_one() -> NetworkTopology {
        let edges = [
            ("e1", "v1", "v2"),
            ("e2", "v2", "v4"),
            ("e3", "v3", "v4"),
            ("e4", "v4", "v5"),
            ("e5", "v4", "v6"),
            ("e6", "v5", "v7"),
        ];
        let mut s = String::from(
            "vertices = [\"v1\", \"v2\", \"v3\", \"v4\", \"v5\", \"v6\", \"v7\"]\n[constants]\nc = 1.0\n",
        );
        for (i, (id, a, b)) in edges.iter().enumerate() {
            s.push_str(&format!(
                "[[pipes]]\nid = \"{id}\"\nfrom = \"{a}\"\nto = \"{b}\"\nlength = {}\ndiameter = {}\nfriction = 0.2\ninclination = 0.0\n",
                1.0 + 0.25 * i as f64,
                0.4 + 0.05 * i as f64
            ));
        }
        parse_network(&s).unwrap()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn grid_shapes() {
        let t = single_pipe(1.0, 1.0, 0.0, 0.0);
        let g = build_grid(&t, &Resolution::PerPipe(vec![10])).unwrap();
        assert_eq!(g.num_nodes(), 11);
        assert!((g.spacing[0] - 0.1).abs() < 1e-16);
        let wsum: f64 = (0..=10).map(|i| g.weight(0, i)).sum();
        assert!((wsum - 1.0).abs() < 1e-15);
        assert!(build_grid(&t, &Resolution::PerPipe(vec![2])).is_err());
        let two = parse_network(
            "vertices = [\"a\", \"b\", \"c\"]\n[[pipes]]\nid = \"p1\"\nfrom = \"a\"\nto = \"b\"\nlength = 1.0\ndiameter = 1.0\nfriction = 0.0\ninclination = 0.0\n[[pipes]]\nid = \"p2\"\nfrom = \"b\"\nto = \"c\"\nlength = 2.0\ndiameter = 1.0\nfriction = 0.0\ninclination = 0.0\n",
        )
        .unwrap();
        let g = build_grid(&two, &Resolution::NodesPerMeter(10.0)).unwrap();
        assert_eq!(g.cells, [10, 20]);
        assert_eq!(g.len(), 2 * (11 + 21));
        assert_eq!(g.locate(11), (1, 0));
    }

    #[test]
    fn inner_product_constants() {
        let t = single_pipe(3.0, 2.0, 0.0, 0.0);
        let g = build_grid(&t, &Resolution::PerPipe(vec![8])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let one = vec![1.0; g.len()];
        assert!((op.inner(&one, &one) - 40.0).abs() < 1e-12);
        assert_eq!(op.inner(&one, &vec![0.0; g.len()]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, v, w) = (random_vec(g.len(), &mut rng), random_vec(g.len(), &mut rng), random_vec(g.len(), &mut rng));
        let uw: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + b).collect();
        assert!((op.inner(&uw, &v) - op.inner(&u, &v) - op.inner(&w, &v)).abs() < 1e-13);
        let bad = NetworkState { t: 0.0, data: vec![0.0; 3] };
        let good = NetworkState { t: 0.0, data: one };
        assert!(weighted_inner_product(&op, &bad, &good).is_err());
    }

    #[test]
    fn projector_properties() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![16; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_vec(g.len(), &mut rng);
            let y = random_vec(g.len(), &mut rng);
            let px = op.project(&x);
            let ppx = op.project(&px);
            let scale = op.norm(&x);
            assert!(px.iter().zip(&ppx).all(|(a, b)| (a - b).abs() <= 1e-12 * scale));
            let lhs = op.inner(&px, &y);
            let rhs = op.inner(&x, &op.project(&y));
            assert!((lhs - rhs).abs() <= 1e-12 * scale * op.norm(&y));
            assert!(op.constraint_values(&px).iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn skew_on_constrained_space() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![16; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let z = op.project(&random_vec(g.len(), &mut rng));
            let az = op.apply_skew(&z);
            assert!(op.inner(&az, &z).abs() <= 1e-12 * op.inner(&z, &z));
        }
        let bad = op.clone().corrupted(0.5);
        let z = bad.project(&random_vec(g.len(), &mut rng));
        let az = bad.apply_skew(&z);
        assert!(bad.inner(&az, &z).abs() > 1e-6 * bad.inner(&z, &z));
    }

    #[test]
    fn constant_pressure_is_in_kernel() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![8; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let z = NetworkState::from_fn(&g, 0.0, |_, _| (1.7, 0.0)).data;
        let mut out = vec![1.0; g.len()];
        op.apply_transport(&z, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transport_is_second_order_inside() {
        use std::f64::consts::PI;
        let t = single_pipe(2.0, 1.0, 0.0, 0.0);
        let mut errors = Vec::new();
        for n in [16, 32, 64] {
            let g = build_grid(&t, &Resolution::PerPipe(vec![n])).unwrap();
            let op = DiscreteOperator::assemble(&t, &g).unwrap();
            let z = NetworkState::from_fn(&g, 0.0, |_, x| ((PI * x).sin(), (PI * x).cos())).data;
            let mut out = vec![0.0; g.len()];
            op.apply_transport(&z, &mut out);
            let mut err = 0.0f64;
            for i in 1..n {
                let x = g.x(0, i);
                err = err.max((out[g.p(0, i)] - 4.0 * PI * (PI * x).sin()).abs());
                err = err.max((out[g.q(0, i)] + PI * (PI * x).cos()).abs());
            }
            errors.push(err);
        }
        assert!(errors[0] / errors[1] > 3.8 && errors[1] / errors[2] > 3.8, "{errors:?}");
    }

    #[test]
    fn lifting_and_forcing() {
        let t = single_pipe(1.0, 1.0, 0.0, 0.0);
        let g = build_grid(&t, &Resolution::PerPipe(vec![10])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let l = op.lift_boundary(&[1.0, 0.0]).unwrap();
        assert_eq!(l[g.p(0, 0)], 1.0);
        assert_eq!(l[g.p(0, 10)], 0.0);
        assert!((l[g.p(0, 3)] - 0.7).abs() < 1e-15);
        assert!((0..=10).all(|i| l[g.q(0, i)] == 0.0));
        let l = op.lift_boundary(&[0.3, 0.8]).unwrap();
        assert_eq!(l[g.p(0, 0)], 0.3);
        assert_eq!(l[g.q(0, 10)], 0.8);
        assert!(op.lift_boundary(&[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));

        // forcing with constant data equals the transport of the lifting
        let phi = [0.3, 0.8];
        let f = op.boundary_forcing(&phi, &[0.0, 0.0]).unwrap();
        let mut al = vec![0.0; g.len()];
        op.apply_transport(&op.lift_boundary(&phi).unwrap(), &mut al);
        assert!(f.iter().zip(&al).all(|(a, b)| (a - b).abs() < 1e-13));
        let f = op.boundary_forcing(&[0.0, 0.0], &[0.5, -1.0]).unwrap();
        let l = op.lift_boundary(&[0.5, -1.0]).unwrap();
        assert!(f.iter().zip(&l).all(|(a, b)| (a + b).abs() < 1e-15));
    }

    #[test]
    fn inactive_slot_is_rejected() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![8; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let mut phi = vec![0.0; 12];
        phi[1] = 1.0; // flux at the end of e1, an inner vertex
        assert!(op.lift_boundary(&phi).is_err());
    }

    #[test]
    fn nonlinearity_values_and_guard() {
        let t = single_pipe(1.0, 1.0, 2.0, 0.0);
        let g = build_grid(&t, &Resolution::PerPipe(vec![4])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        assert_eq!(op.beta[0], 1.0);
        let v = NetworkState::from_fn(&g, 0.0, |_, _| (2.0, -3.0)).data;
        let f = op.nonlinearity(&v).unwrap();
        assert_eq!((f[0], f[1]), (0.0, 4.5));
        let jac = op.jacobian(&v).unwrap();
        assert_eq!((jac.a[0], jac.b[0]), (-2.25, -3.0));
        let z = NetworkState::from_fn(&g, 0.0, |_, _| (2.0, 0.0)).data;
        assert!(op.nonlinearity(&z).unwrap().iter().all(|&x| x == 0.0));
        let vac = NetworkState::from_fn(&g, 0.0, |_, _| (0.0, 1.0)).data;
        assert!(matches!(op.nonlinearity(&vac), Err(GasnetError::VacuumGuard { pipe: 1, node: 0, .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences_and_adjoint() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![8; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..g.len()).map(|i| if i % 2 == 0 { rng.gen_range(1.0..3.0) } else { rng.gen_range(-1.0..1.0) }).collect();
        let w = random_vec(g.len(), &mut rng);
        let jac = op.jacobian(&v).unwrap();
        let mut jw = vec![0.0; g.len()];
        op.apply_jacobian(&jac, &w, &mut jw);
        let f0 = op.nonlinearity(&v).unwrap();
        let mut prev = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let ve: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + eps * b).collect();
            let fe = op.nonlinearity(&ve).unwrap();
            let r: Vec<f64> = (0..g.len()).map(|i| fe[i] - f0[i] - eps * jw[i]).collect();
            let err = op.norm(&r) / eps;
            assert!(err < prev * 0.2 || err < 1e-9);
            prev = err;
        }
        let u = random_vec(g.len(), &mut rng);
        let mut ju = vec![0.0; g.len()];
        let mut jtw = vec![0.0; g.len()];
        op.apply_jacobian(&jac, &u, &mut ju);
        op.apply_jacobian_adjoint(&jac, &w, &mut jtw);
        let lhs = op.inner(&ju, &w);
        let rhs = op.inner(&u, &jtw);
        assert!((lhs - rhs).abs() <= 1e-12 * op.norm(&u) * op.norm(&w));
    }

    #[test]
    fn lipschitz_ratio_below_bound() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![8; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let bx = StateBox::uniform(6, Interval::new(0.5, 3.0), Interval::new(-1.0, 2.0));
        let bound = op.lipschitz_bound(&bx);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..g.len()).map(|i| if i % 2 == 0 { rng.gen_range(0.5..3.0) } else { rng.gen_range(-1.0..2.0) }).collect()
        };
        for _ in 0..200 {
            let (a, b) = (sample(&mut rng), sample(&mut rng));
            let fa = op.nonlinearity(&a).unwrap();
            let fb = op.nonlinearity(&b).unwrap();
            let df: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
            let dv: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!(op.norm(&df) <= bound * op.norm(&dv));
        }
    }

    #[test]
    fn implicit_solver_satisfies_bordered_system() {
        let t = figure_one();
        let g = build_grid(&t, &Resolution::PerPipe(vec![12; 6])).unwrap();
        let op = DiscreteOperator::assemble(&t, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_vec(g.len(), &mut rng);
        for adjoint in [false, true] {
            let gen = if adjoint { Generator::linear().adjoint() } else { Generator::linear() };
            let theta = 0.01;
            let solver = op.implicit_solver(theta, &gen).unwrap();
            let x = solver.solve(&b);
            assert!(op.constraint_values(&x).iter().all(|c| c.abs() < 1e-11));
            let mut kx = vec![0.0; g.len()];
            op.apply_generator(&gen, &x, &mut kx);
            let r: Vec<f64> = (0..g.len()).map(|i| x[i] - theta * kx[i] - b[i]).collect();
            let pr = op.project(&r);
            assert!(op.norm(&pr) < 1e-11 * op.norm(&b));
        }
    }

    #[test]
    fn dependent_constraints_are_rejected() {
        let mass = vec![1.0; 4];
        let rows = vec![vec![(0, 1.0)], vec![(0, 2.0)]];
        assert!(matches!(schur_inverse(&rows, &mass), Err(GasnetError::Assembly(_))));
    }
}
