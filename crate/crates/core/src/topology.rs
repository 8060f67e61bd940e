//! Communication graphs, per-agent grouping, and the compact per-agent view
//! of the global dynamics.
//!
//! Each agent groups itself with its immediate neighbors and works on a
//! local copy of the global problem: the block rows/columns of agents
//! outside the neighborhood are zeroed in `(A_c, B_c)`, and a regularized
//! averaging map `A_e = (I - theta C) (x) I_n` turns stacked states into
//! consensus errors while staying invertible for `theta < 1`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;

/// Errors from graph construction and matrix assembly.
#[derive(Debug, Clone, PartialEq)]
pub enum TopologyError {
    /// Adjacency not square / not symmetric / nonzero diagonal.
    BadAdjacency(String),
    /// The graph is not connected (no spanning tree).
    Disconnected,
    /// An edge references a node outside `0..n_agents`.
    NodeOutOfRange { node: usize, n_agents: usize },
    /// Dynamics dimensions differ across agents.
    DimensionMismatch(String),
    /// The error-map regularizer must lie strictly inside (0, 1).
    BadTheta(f64),
}

impl fmt::Display for TopologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyError::BadAdjacency(msg) => write!(f, "bad adjacency: {msg}"),
            TopologyError::Disconnected => write!(f, "graph is not connected"),
            TopologyError::NodeOutOfRange { node, n_agents } => {
                write!(f, "node {node} out of range for {n_agents} agents")
            }
            TopologyError::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            TopologyError::BadTheta(theta) => {
                write!(f, "theta must lie in (0, 1), got {theta}")
            }
        }
    }
}

impl core::error::Error for TopologyError {}

/// Undirected communication graph with neighbor-inclusive groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n_agents: usize,
    adjacency: DMatrix<f64>,
    neighbor_sets: Vec<Vec<usize>>, // each includes the agent itself, sorted
}

impl Topology {
    /// Build from an edge list over `0..n_agents`.
    pub fn from_edges(n_agents: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        let mut adjacency = DMatrix::zeros(n_agents, n_agents);
        for &(a, b) in edges {
            for node in [a, b] {
                if node >= n_agents {
                    return Err(TopologyError::NodeOutOfRange { node, n_agents });
                }
            }
            if a == b {
                return Err(TopologyError::BadAdjacency(format!("self-loop at {a}")));
            }
            adjacency[(a, b)] = 1.0;
            adjacency[(b, a)] = 1.0;
        }
        Self::from_adjacency(adjacency)
    }

    /// Build from a symmetric 0/1 adjacency matrix with zero diagonal.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self, TopologyError> {
        let n_agents = adjacency.nrows();
        if n_agents == 0 {
            return Err(TopologyError::BadAdjacency("empty graph".into()));
        }
        if adjacency.ncols() != n_agents {
            return Err(TopologyError::BadAdjacency("not square".into()));
        }
        for i in 0..n_agents {
            if adjacency[(i, i)] != 0.0 {
                return Err(TopologyError::BadAdjacency(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n_agents {
                let v = adjacency[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(TopologyError::BadAdjacency(format!(
                        "entry ({i},{j}) = {v} is not 0/1"
                    )));
                }
                if adjacency[(i, j)] != adjacency[(j, i)] {
                    return Err(TopologyError::BadAdjacency(format!(
                        "asymmetric at ({i},{j})"
                    )));
                }
            }
        }

        // connectivity via breadth-first search
        if n_agents > 1 {
            let mut seen = vec![false; n_agents];
            let mut queue = vec![0usize];
            seen[0] = true;
            while let Some(i) = queue.pop() {
                for j in 0..n_agents {
                    if adjacency[(i, j)] == 1.0 && !seen[j] {
                        seen[j] = true;
                        queue.push(j);
                    }
                }
            }
            if seen.iter().any(|&s| !s) {
                return Err(TopologyError::Disconnected);
            }
        }

        let neighbor_sets = (0..n_agents)
            .map(|i| {
                let mut set: Vec<usize> = (0..n_agents)
                    .filter(|&j| j == i || adjacency[(i, j)] == 1.0)
                    .collect();
                set.sort_unstable();
                set
            })
            .collect();
        Ok(Topology {
            n_agents,
            adjacency,
            neighbor_sets,
        })
    }

    /// Complete graph on `n_agents` nodes.
    pub fn complete(n_agents: usize) -> Result<Self, TopologyError> {
        let mut adjacency = DMatrix::from_element(n_agents, n_agents, 1.0);
        adjacency.fill_diagonal(0.0);
        Self::from_adjacency(adjacency)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// The neighbor-inclusive group of agent `i`, sorted.
    pub fn neighbor_set(&self, i: usize) -> &[usize] {
        &self.neighbor_sets[i]
    }

    /// Neighbors of `i` excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_sets[i].iter().copied().filter(move |&j| j != i)
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.neighbor_sets[i].len()
    }

    pub fn contains_edge(&self, a: usize, b: usize) -> bool {
        a < self.n_agents && b < self.n_agents && self.adjacency[(a, b)] == 1.0
    }

    /// Directed link list (j -> i) for every undirected edge, sorted.
    pub fn links(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_agents {
            for j in 0..self.n_agents {
                if i != j && self.adjacency[(i, j)] == 1.0 {
                    out.push((j, i));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Graph Laplacian `L = D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_agents;
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// Row-stochastic neighborhood averaging matrix
    /// `C[j][l] = 1 / card(N_j)` for `l` in `N_j`.
    pub fn averaging_matrix(&self) -> DMatrix<f64> {
        let n = self.n_agents;
        let mut c = DMatrix::zeros(n, n);
        for j in 0..n {
            let w = 1.0 / self.cardinality(j) as f64;
            for &l in self.neighbor_set(j) {
                c[(j, l)] = w;
            }
        }
        c
    }
}

/// Discrete-time linear dynamics of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Indices of the translational coordinates used by consensus metrics.
    pub translational: Vec<usize>,
}

impl AgentDynamics {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        translational: Vec<usize>,
    ) -> Result<Self, TopologyError> {
        if a.nrows() != a.ncols() {
            return Err(TopologyError::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != a.nrows() {
            return Err(TopologyError::DimensionMismatch(
                "B row count must match A".into(),
            ));
        }
        if let Some(&ix) = translational.iter().find(|&&ix| ix >= a.nrows()) {
            return Err(TopologyError::DimensionMismatch(format!(
                "translational index {ix} out of range"
            )));
        }
        Ok(AgentDynamics { a, b, translational })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// One step of the dynamics.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    /// Three-axis double integrator sampled at `ts` seconds, with four
    /// inputs mapped onto the three accelerations (the fourth drives all
    /// axes equally).
    pub fn double_integrator_3d(ts: f64) -> AgentDynamics {
        let mut a = DMatrix::identity(6, 6);
        for i in 0..3 {
            a[(i, i + 3)] = ts;
        }
        let mut alloc_map = DMatrix::zeros(3, 4);
        for i in 0..3 {
            alloc_map[(i, i)] = 1.0;
            alloc_map[(i, 3)] = 0.5;
        }
        let mut b = DMatrix::zeros(6, 4);
        b.view_mut((0, 0), (3, 4)).copy_from(&(ts * ts / 2.0 * &alloc_map));
        b.view_mut((3, 0), (3, 4)).copy_from(&(ts * alloc_map));
        AgentDynamics {
            a,
            b,
            translational: vec![0, 1, 2],
        }
    }
}

/// Agent `i`'s local copy of the global problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSystem {
    pub agent: usize,
    pub a_c: DMatrix<f64>,
    pub b_c: DMatrix<f64>,
    pub a_e: DMatrix<f64>,
    pub theta: f64,
    pub n: usize,
    pub m: usize,
    pub n_agents: usize,
}

/// Block-diagonal global system matrices from per-agent dynamics.
pub fn build_global(
    dynamics: &[AgentDynamics],
) -> Result<(DMatrix<f64>, DMatrix<f64>), TopologyError> {
    let first = dynamics
        .first()
        .ok_or_else(|| TopologyError::DimensionMismatch("no agents".into()))?;
    let (n, m) = (first.state_dim(), first.input_dim());
    for (i, d) in dynamics.iter().enumerate() {
        if d.state_dim() != n || d.input_dim() != m {
            return Err(TopologyError::DimensionMismatch(format!(
                "agent {i} has dimensions ({}, {}) != ({n}, {m})",
                d.state_dim(),
                d.input_dim()
            )));
        }
    }
    let count = dynamics.len();
    let mut a_m = DMatrix::zeros(n * count, n * count);
    let mut b_m = DMatrix::zeros(n * count, m * count);
    for (i, d) in dynamics.iter().enumerate() {
        a_m.view_mut((i * n, i * n), (n, n)).copy_from(&d.a);
        b_m.view_mut((i * n, i * m), (n, m)).copy_from(&d.b);
    }
    Ok((a_m, b_m))
}

/// Regularized consensus-error map `A_e = (I - theta C) (x) I_n`.
///
/// `C` is the row-stochastic neighborhood averaging matrix, whose spectral
/// radius is 1, so `I - theta C` is invertible for every `theta` in (0, 1);
/// as `theta -> 1` the row block of agent `i` approaches the true
/// state-minus-local-mean error.
pub fn build_error_map(
    topology: &Topology,
    n: usize,
    theta: f64,
) -> Result<DMatrix<f64>, TopologyError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(TopologyError::BadTheta(theta));
    }
    let c = topology.averaging_matrix();
    let small = DMatrix::identity(topology.n_agents(), topology.n_agents()) - theta * c;
    Ok(small.kronecker(&DMatrix::identity(n, n)))
}

/// Agent `i`'s compact system: global matrices with non-neighbor block rows
/// and columns zeroed, plus the shared error map.
pub fn build_compact(
    topology: &Topology,
    a_m: &DMatrix<f64>,
    b_m: &DMatrix<f64>,
    i: usize,
    theta: f64,
) -> Result<CompactSystem, TopologyError> {
    let n_agents = topology.n_agents();
    if a_m.nrows() % n_agents != 0 || b_m.ncols() % n_agents != 0 {
        return Err(TopologyError::DimensionMismatch(
            "global matrices do not tile by agent count".into(),
        ));
    }
    let n = a_m.nrows() / n_agents;
    let m = b_m.ncols() / n_agents;
    let mut a_c = a_m.clone();
    let mut b_c = b_m.clone();
    for j in 0..n_agents {
        if topology.neighbor_set(i).contains(&j) {
            continue;
        }
        a_c.view_mut((j * n, 0), (n, n * n_agents)).fill(0.0);
        a_c.view_mut((0, j * n), (n * n_agents, n)).fill(0.0);
        b_c.view_mut((j * n, 0), (n, m * n_agents)).fill(0.0);
        b_c.view_mut((0, j * m), (n * n_agents, m)).fill(0.0);
    }
    let a_e = build_error_map(topology, n, theta)?;
    Ok(CompactSystem {
        agent: i,
        a_c,
        b_c,
        a_e,
        theta,
        n,
        m,
        n_agents,
    })
}

/// Local consensus point: mean of the agent's own state and its predicted
/// neighbor states.
pub fn local_consensus_point(x_i: &DVector<f64>, neighbor_states: &[DVector<f64>]) -> DVector<f64> {
    let mut sum = x_i.clone();
    for x in neighbor_states {
        sum += x;
    }
    sum / (neighbor_states.len() + 1) as f64
}

/// Consensus error of one agent.
pub fn consensus_error(x_i: &DVector<f64>, delta_i: &DVector<f64>) -> DVector<f64> {
    x_i - delta_i
}

/// Largest pairwise distance between local consensus points, restricted to
/// the translational coordinates.
pub fn delta_max(points: &[DVector<f64>], translational: &[usize]) -> f64 {
    let mut best: f64 = 0.0;
    for (a, pa) in points.iter().enumerate() {
        for pb in points.iter().skip(a + 1) {
            let d: f64 = translational
                .iter()
                .map(|&ix| {
                    let diff = pa[ix] - pb[ix];
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}
