//! Pipeline network topology: parsing, tree validation and vertex
//! classification into junctions, entries and exits.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{GasnetError, Result};

/// Global physical constants shared by every pipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Sound speed in m/s.
    #[serde(default = "default_sound_speed")]
    pub c: f64,
    /// Gravitational acceleration in m/s².
    #[serde(default = "default_gravity")]
    pub g: f64,
}

fn default_sound_speed() -> f64 {
    340.0
}

fn default_gravity() -> f64 {
    9.81
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            c: default_sound_speed(),
            g: default_gravity(),
        }
    }
}

/// Geometry and loss coefficients of a single pipe, with the derived
/// friction (`beta`) and gravity (`gamma`) coefficients of the momentum
/// equation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipeParameters {
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
    pub inclination: f64,
    beta: f64,
    gamma: f64,
}

impl PipeParameters {
    pub fn new(
        length: f64,
        diameter: f64,
        friction: f64,
        inclination: f64,
        constants: &PhysicalConstants,
    ) -> std::result::Result<Self, String> {
        if !(length.is_finite() && length > 0.0) {
            return Err("nonpositive length".into());
        }
        if !(diameter.is_finite() && diameter > 0.0) {
            return Err("nonpositive diameter".into());
        }
        if !(friction.is_finite() && friction >= 0.0) {
            return Err("negative friction coefficient".into());
        }
        if !(inclination.is_finite() && inclination.abs() < FRAC_PI_2) {
            return Err("inclination must lie in (-pi/2, pi/2)".into());
        }
        if !(constants.c.is_finite() && constants.c > 0.0) {
            return Err("sound speed must be positive".into());
        }
        Ok(Self {
            length,
            diameter,
            friction,
            inclination,
            beta: friction / (2.0 * diameter),
            gamma: constants.g * inclination.sin() / (constants.c * constants.c),
        })
    }

    /// Friction coefficient `lambda / (2 D)`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Gravity coefficient `g sin(alpha) / c²`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipe {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub params: PipeParameters,
}

/// Directed pipe network. Edge order fixes the pipe index `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    pub constants: PhysicalConstants,
    pub vertices: Vec<String>,
    pub pipes: Vec<Pipe>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    #[serde(default)]
    constants: Option<PhysicalConstants>,
    vertices: Vec<String>,
    pipes: Vec<RawPipe>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipe {
    id: String,
    from: String,
    to: String,
    length: f64,
    diameter: f64,
    friction: f64,
    inclination: f64,
}

/// Network description as it appears inside a scenario document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkDocument {
    #[serde(default)]
    pub constants: Option<PhysicalConstants>,
    pub vertices: Vec<String>,
    pub pipes: Vec<PipeDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipeDocument {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length: f64,
    pub diameter: f64,
    pub friction: f64,
    pub inclination: f64,
}

/// Parses a network document (TOML) into a validated topology.
pub fn parse_network(document: &str) -> Result<NetworkTopology> {
    let raw: RawNetwork = toml::from_str(document).map_err(|e| GasnetError::Parse(e.to_string()))?;
    let doc = NetworkDocument {
        constants: raw.constants,
        vertices: raw.vertices,
        pipes: raw
            .pipes
            .into_iter()
            .map(|p| PipeDocument {
                id: p.id,
                from: p.from,
                to: p.to,
                length: p.length,
                diameter: p.diameter,
                friction: p.friction,
                inclination: p.inclination,
            })
            .collect(),
    };
    NetworkTopology::from_document(&doc)
}

impl NetworkTopology {
    pub fn from_document(doc: &NetworkDocument) -> Result<Self> {
        let constants = doc.constants.unwrap_or_default();
        if !(constants.c.is_finite() && constants.c > 0.0 && constants.g.is_finite()) {
            return Err(GasnetError::Parse("constants: c must be positive, g finite".into()));
        }
        let mut index = HashMap::new();
        for (i, v) in doc.vertices.iter().enumerate() {
            if index.insert(v.clone(), i).is_some() {
                return Err(GasnetError::Parse(format!("duplicate vertex id {v}")));
            }
        }
        let mut pipes = Vec::with_capacity(doc.pipes.len());
        let mut seen = HashMap::new();
        for p in &doc.pipes {
            if seen.insert(p.id.clone(), ()).is_some() {
                return Err(GasnetError::Parse(format!("duplicate pipe id {}", p.id)));
            }
            let invalid = |reason: String| GasnetError::InvalidPipe {
                pipe: p.id.clone(),
                reason,
            };
            let from = *index
                .get(&p.from)
                .ok_or_else(|| invalid(format!("unknown start vertex {}", p.from)))?;
            let to = *index
                .get(&p.to)
                .ok_or_else(|| invalid(format!("unknown end vertex {}", p.to)))?;
            if from == to {
                return Err(invalid("start and end vertex coincide".into()));
            }
            let params =
                PipeParameters::new(p.length, p.diameter, p.friction, p.inclination, &constants)
                    .map_err(invalid)?;
            pipes.push(Pipe {
                id: p.id.clone(),
                from,
                to,
                params,
            });
        }
        if pipes.is_empty() {
            return Err(GasnetError::Parse("network has no pipes".into()));
        }
        Ok(Self {
            constants,
            vertices: doc.vertices.clone(),
            pipes,
            index,
        })
    }

    pub fn num_pipes(&self) -> usize {
        self.pipes.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertex_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn pipe_index(&self, id: &str) -> Option<usize> {
        self.pipes.iter().position(|p| p.id == id)
    }

    /// Reverses the orientation of every pipe.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.pipes {
            std::mem::swap(&mut p.from, &mut p.to);
        }
        out
    }
}

/// Outcome of [`validate_tree`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeReport {
    pub connected: bool,
    pub acyclic: bool,
    pub count_ok: bool,
    /// Pipe indices forming the first cycle found.
    pub cycle_witness: Vec<usize>,
    /// Connected components as lists of vertex ids (only when disconnected).
    pub components: Vec<Vec<String>>,
}

impl TreeReport {
    pub fn is_valid(&self) -> bool {
        self.connected && self.acyclic && self.count_ok
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let mut msgs = Vec::new();
        if !self.acyclic {
            msgs.push(format!("cycle detected (pipes {:?})", self.cycle_witness));
        }
        if !self.connected {
            msgs.push(format!("disconnected: components {:?}", self.components));
        }
        if !self.count_ok && self.acyclic && self.connected {
            msgs.push("vertex count must equal pipe count + 1".into());
        }
        Err(GasnetError::InvalidNetwork(msgs.join("; ")))
    }
}

/// Checks that the undirected graph underlying `topology` is a tree.
pub fn validate_tree(topology: &NetworkTopology) -> TreeReport {
    let n = topology.num_vertices();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut cycle_witness = Vec::new();
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for (k, pipe) in topology.pipes.iter().enumerate() {
        let (a, b) = (find(&mut parent, pipe.from), find(&mut parent, pipe.to));
        if a == b {
            if cycle_witness.is_empty() {
                // path between the endpoints through already accepted pipes
                let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
                let mut visited = vec![false; n];
                let mut queue = VecDeque::from([pipe.from]);
                visited[pipe.from] = true;
                while let Some(v) = queue.pop_front() {
                    if v == pipe.to {
                        break;
                    }
                    for &(w, e) in &adjacency[v] {
                        if !visited[w] {
                            visited[w] = true;
                            prev[w] = Some((v, e));
                            queue.push_back(w);
                        }
                    }
                }
                let mut cur = pipe.to;
                while let Some((v, e)) = prev[cur] {
                    cycle_witness.push(e);
                    cur = v;
                }
                cycle_witness.push(k);
                cycle_witness.sort_unstable();
            }
        } else {
            parent[a] = b;
            adjacency[pipe.from].push((pipe.to, k));
            adjacency[pipe.to].push((pipe.from, k));
        }
    }

    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        groups.entry(root).or_default().push(topology.vertices[v].clone());
    }
    let connected = groups.len() <= 1;
    TreeReport {
        connected,
        acyclic: cycle_witness.is_empty(),
        count_ok: n == topology.num_pipes() + 1,
        cycle_witness,
        components: if connected {
            Vec::new()
        } else {
            groups.into_values().collect()
        },
    }
}

/// Role of a vertex in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VertexRole {
    Inner,
    Entry,
    Exit,
}

/// Incidence data and the inner/entry/exit partition of the vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexClassification {
    /// Incident pipes of every vertex (`kappa(v)`), in pipe order.
    pub incident: Vec<Vec<usize>>,
    pub roles: Vec<VertexRole>,
    pub inner: Vec<usize>,
    pub entry: Vec<usize>,
    pub exit: Vec<usize>,
    starts: Vec<usize>,
    ends: Vec<usize>,
}

impl VertexClassification {
    /// Incidence sign: `-1` if `v` starts pipe `k`, `+1` if it ends it, else `0`.
    pub fn xi(&self, k: usize, v: usize) -> i8 {
        if self.starts[k] == v {
            -1
        } else if self.ends[k] == v {
            1
        } else {
            0
        }
    }

    pub fn is_inner(&self, v: usize) -> bool {
        self.roles[v] == VertexRole::Inner
    }

    /// True when the start of pipe `k` is a controlled entry vertex.
    pub fn starts_at_entry(&self, k: usize) -> bool {
        self.roles[self.starts[k]] == VertexRole::Entry
    }

    /// True when the end of pipe `k` is a controlled exit vertex.
    pub fn ends_at_exit(&self, k: usize) -> bool {
        self.roles[self.ends[k]] == VertexRole::Exit
    }
}

/// Classifies vertices. Assumes `topology` passed [`validate_tree`].
pub fn classify_vertices(topology: &NetworkTopology) -> VertexClassification {
    let n = topology.num_vertices();
    let mut incident = vec![Vec::new(); n];
    let mut starts = Vec::with_capacity(topology.num_pipes());
    let mut ends = Vec::with_capacity(topology.num_pipes());
    for (k, p) in topology.pipes.iter().enumerate() {
        incident[p.from].push(k);
        incident[p.to].push(k);
        starts.push(p.from);
        ends.push(p.to);
    }
    let mut roles = Vec::with_capacity(n);
    let (mut inner, mut entry, mut exit) = (Vec::new(), Vec::new(), Vec::new());
    for v in 0..n {
        let role = if incident[v].len() > 1 {
            inner.push(v);
            VertexRole::Inner
        } else if incident[v].first().is_some_and(|&k| starts[k] == v) {
            entry.push(v);
            VertexRole::Entry
        } else {
            exit.push(v);
            VertexRole::Exit
        };
        roles.push(role);
    }
    VertexClassification {
        incident,
        roles,
        inner,
        entry,
        exit,
        starts,
        ends,
    }
}
