//! Communication topologies, doubly stochastic mixing matrices and their
//! spectral quantities.
//!
//! A [`MixingMatrix`] `W` acts on the agent dimension: the network state is a
//! `d x n` matrix `X` and one gossip step computes `X W`. The mixing rate is
//! `lambda_w = 1 - ||W - J||_2^2`, where `J` is the exact-averaging matrix that
//! models a round through the server.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{hashed_unit, Purpose, StreamKey};

/// Tolerance used when checking matrices produced inside the crate.
pub const CONSTRUCTED_TOL: f64 = 1e-12;
/// Tolerance accepted by [`spectral_gap`].
pub const SPECTRAL_INPUT_TOL: f64 = 1e-10;
/// Tolerance accepted for matrices read from disk.
pub const LOADED_TOL: f64 = 1e-8;

const POWER_ITER_TOL: f64 = 1e-12;
const UNIT_SNAP_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 100_000;
const POWER_ITER_SEED: u64 = 0x6d69_7869_6e67;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid network size {0}: at least 2 agents are required")]
    InvalidSize(usize),
    #[error("unsupported topology `{0}`")]
    UnsupportedTopology(String),
    #[error("invalid topology parameter: {0}")]
    InvalidParam(String),
    #[error("edge ({0}, {1}) is invalid for a graph with {2} agents")]
    InvalidEdge(usize, usize, usize),
    #[error("matrix is not doubly stochastic: {0}")]
    NotDoublyStochastic(String),
    #[error("matrix violates the graph sparsity pattern at ({row}, {col}): weight {value}")]
    PatternViolation { row: usize, col: usize, value: f64 },
    #[error("matrix parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{name} = {value} is outside [0, 1]")]
    Domain { name: &'static str, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Path,
    Complete,
    ErdosRenyi,
    Custom,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Path => "path",
            TopologyKind::Complete => "complete",
            TopologyKind::ErdosRenyi => "erdos_renyi",
            TopologyKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for TopologyKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ring" => Ok(TopologyKind::Ring),
            "path" => Ok(TopologyKind::Path),
            "complete" => Ok(TopologyKind::Complete),
            "erdos_renyi" | "er" => Ok(TopologyKind::ErdosRenyi),
            "custom" => Ok(TopologyKind::Custom),
            other => Err(GraphError::UnsupportedTopology(other.to_string())),
        }
    }
}

/// Undirected simple graph over agents `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    kind: TopologyKind,
}

impl Graph {
    /// Builds a graph from an explicit edge list. Pairs are normalized to
    /// `(min, max)`; duplicates collapse.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(GraphError::InvalidSize(n));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j || i >= n || j >= n {
                return Err(GraphError::InvalidEdge(i, j, n));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self { n, edges: set, kind: TopologyKind::Custom })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| if a == i { Some(b) } else if b == i { Some(a) } else { None })
            .collect()
    }

    /// Number of connected components (union-find).
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.n;
        for &(i, j) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                components -= 1;
            }
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }
}

/// Builds a named topology. `param` is the edge probability for
/// Erdős–Rényi graphs; `seed` is only consumed by Erdős–Rényi.
pub fn build_topology(kind: TopologyKind, n: usize, param: Option<f64>, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(GraphError::InvalidSize(n));
    }
    let mut edges = BTreeSet::new();
    match kind {
        TopologyKind::Ring | TopologyKind::Path => {
            for i in 0..n - 1 {
                edges.insert((i, i + 1));
            }
            if kind == TopologyKind::Ring && n > 2 {
                edges.insert((0, n - 1));
            }
        }
        TopologyKind::Complete => {
            for i in 0..n {
                for j in i + 1..n {
                    edges.insert((i, j));
                }
            }
        }
        TopologyKind::ErdosRenyi => {
            let prob = param.ok_or_else(|| {
                GraphError::InvalidParam("erdos_renyi requires an edge probability".into())
            })?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(GraphError::InvalidParam(format!("edge probability {prob} not in [0, 1]")));
            }
            let mut rng = StreamKey::new(seed, Purpose::Topology).rng();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < prob {
                        edges.insert((i, j));
                    }
                }
            }
        }
        TopologyKind::Custom => {
            return Err(GraphError::UnsupportedTopology(
                "custom graphs are built with Graph::from_edges".into(),
            ))
        }
    }
    Ok(Graph { n, edges, kind })
}

/// Doubly stochastic mixing matrix with cached spectral quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    w: Array2<f64>,
    lambda_second: f64,
    lambda_w: f64,
}

impl MixingMatrix {
    /// Validates `w` (nonnegative, doubly stochastic within `tol`) and computes
    /// its spectral quantities.
    pub fn new(w: Array2<f64>, tol: f64) -> Result<Self> {
        check_doubly_stochastic(&w, tol)?;
        let (lambda_second, lambda_w) = spectral_gap_unchecked(&w);
        Ok(Self { w, lambda_second, lambda_w })
    }

    /// The exact-averaging matrix `J = 11^T / n`.
    pub fn averaging(n: usize) -> Self {
        let w = Array2::from_elem((n, n), 1.0 / n as f64);
        Self { w, lambda_second: 0.0, lambda_w: 1.0 }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.w
    }

    /// Largest singular value of `W - J`.
    pub fn lambda_second(&self) -> f64 {
        self.lambda_second
    }

    /// Mixing rate `1 - lambda_second^2`, clamped to `[0, 1]`.
    pub fn lambda_w(&self) -> f64 {
        self.lambda_w
    }

    /// Checks that every off-diagonal nonzero sits on an edge of `g`.
    pub fn check_pattern(&self, g: &Graph, tol: f64) -> Result<()> {
        if g.n() != self.n() {
            return Err(GraphError::Parse {
                line: 1,
                msg: format!("matrix dimension {} does not match graph size {}", self.n(), g.n()),
            });
        }
        for ((i, j), &v) in self.w.indexed_iter() {
            if i != j && !g.has_edge(i, j) && v.abs() > tol {
                return Err(GraphError::PatternViolation { row: i, col: j, value: v });
            }
        }
        Ok(())
    }
}

/// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// the remaining mass on the diagonal.
pub fn metropolis_weights(g: &Graph) -> MixingMatrix {
    let n = g.n();
    let deg = g.degrees();
    let mut w = Array2::<f64>::zeros((n, n));
    for (i, j) in g.edges() {
        let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[[i, j]] = v;
        w[[j, i]] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[[i, j]]).sum();
        w[[i, i]] = 1.0 - off;
    }
    let (lambda_second, lambda_w) = spectral_gap_unchecked(&w);
    MixingMatrix { w, lambda_second, lambda_w }
}

fn check_doubly_stochastic(w: &Array2<f64>, tol: f64) -> Result<()> {
    let (rows, cols) = w.dim();
    if rows != cols || rows == 0 {
        return Err(GraphError::NotDoublyStochastic(format!("matrix is {rows}x{cols}, not square")));
    }
    if let Some(((i, j), v)) = w.indexed_iter().find(|(_, v)| !v.is_finite() || **v < -tol) {
        return Err(GraphError::NotDoublyStochastic(format!("entry ({i}, {j}) = {v} is negative")));
    }
    for (i, row) in w.rows().into_iter().enumerate() {
        let s = row.sum();
        if (s - 1.0).abs() > tol {
            return Err(GraphError::NotDoublyStochastic(format!("row {i} sums to {s}")));
        }
    }
    for (j, col) in w.columns().into_iter().enumerate() {
        let s = col.sum();
        if (s - 1.0).abs() > tol {
            return Err(GraphError::NotDoublyStochastic(format!("column {j} sums to {s}")));
        }
    }
    Ok(())
}

/// Returns `(lambda_second, lambda_w)` for a doubly stochastic matrix.
///
/// `lambda_second` is the largest singular value of `W - J`, found by power
/// iteration on `(W - J)(W - J)^T` from a fixed pseudo-random start vector.
pub fn spectral_gap(w: &Array2<f64>) -> Result<(f64, f64)> {
    check_doubly_stochastic(w, SPECTRAL_INPUT_TOL)?;
    Ok(spectral_gap_unchecked(w))
}

fn spectral_gap_unchecked(w: &Array2<f64>) -> (f64, f64) {
    let n = w.nrows();
    let centered = w - 1.0 / n as f64;
    let gram = centered.dot(&centered.t());

    let mut v: Array1<f64> =
        Array1::from_iter((0..n as u64).map(|i| 2.0 * hashed_unit(POWER_ITER_SEED, i) - 1.0));
    // The all-ones direction is in the kernel of the Gram matrix already; removing
    // it keeps the start vector honest for near-zero spectra.
    let mean = v.mean().unwrap_or(0.0);
    v -= mean;
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return (0.0, 1.0);
    }
    v /= norm;

    let mut rayleigh = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let next = gram.dot(&v);
        let next_rayleigh = v.dot(&next);
        let next_norm = next.dot(&next).sqrt();
        if next_norm <= f64::MIN_POSITIVE {
            rayleigh = 0.0;
            break;
        }
        v = next / next_norm;
        let converged = (next_rayleigh - rayleigh).abs() <= POWER_ITER_TOL * next_rayleigh.abs();
        rayleigh = next_rayleigh;
        if converged {
            break;
        }
    }
    // Power iteration stops short of a repeated unit singular value
    // (disconnected graphs); such results are 1 up to round-off.
    if rayleigh > 1.0 - UNIT_SNAP_TOL {
        rayleigh = rayleigh.max(1.0);
    }
    let lambda_second = rayleigh.max(0.0).sqrt();
    let lambda_w = (1.0 - lambda_second * lambda_second).clamp(0.0, 1.0);
    (lambda_second, lambda_w)
}

/// Expected mixing rate `lambda_w + p (1 - lambda_w)`.
///
/// A zero result is legal here; callers that need a contraction must reject it.
pub fn expected_mixing_rate(lambda_w: f64, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_w) {
        return Err(GraphError::Domain { name: "lambda_w", value: lambda_w });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::Domain { name: "p", value: p });
    }
    Ok(lambda_w + p * (1.0 - lambda_w))
}

/// Server-access probability paired with the expected mixing rate it yields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommPolicy {
    p: f64,
    lambda_p: f64,
}

impl CommPolicy {
    /// Fails with [`GraphError::Domain`] when `lambda_p` would be zero, i.e. a
    /// disconnected graph with no server access.
    pub fn new(mixing: &MixingMatrix, p: f64) -> Result<Self> {
        let lambda_p = expected_mixing_rate(mixing.lambda_w(), p)?;
        if lambda_p <= 0.0 {
            return Err(GraphError::Domain { name: "lambda_p", value: lambda_p });
        }
        Ok(Self { p, lambda_p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda_p(&self) -> f64 {
        self.lambda_p
    }
}

/// Parses the dense-matrix text format: a line with `n`, then `n` rows of `n`
/// whitespace-separated reals. Lines starting with `#` and blank lines are skipped.
pub fn parse_dense_matrix<R: Read>(reader: R) -> Result<Array2<f64>> {
    let reader = BufReader::new(reader);
    let mut n: Option<usize> = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match n {
            None => {
                let parsed = trimmed.parse::<usize>().map_err(|e| GraphError::Parse {
                    line: line_no,
                    msg: format!("expected dimension, got `{trimmed}` ({e})"),
                })?;
                if parsed == 0 {
                    return Err(GraphError::Parse { line: line_no, msg: "dimension must be positive".into() });
                }
                n = Some(parsed);
            }
            Some(dim) => {
                if rows == dim {
                    return Err(GraphError::Parse { line: line_no, msg: format!("more than {dim} rows") });
                }
                let before = data.len();
                for tok in trimmed.split_whitespace() {
                    let v = tok.parse::<f64>().map_err(|e| GraphError::Parse {
                        line: line_no,
                        msg: format!("invalid number `{tok}` ({e})"),
                    })?;
                    data.push(v);
                }
                let got = data.len() - before;
                if got != dim {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: format!("expected {dim} values, found {got}"),
                    });
                }
                rows += 1;
            }
        }
    }
    let dim = n.ok_or(GraphError::Parse { line: 0, msg: "empty matrix file".into() })?;
    if rows != dim {
        return Err(GraphError::Parse { line: 0, msg: format!("expected {dim} rows, found {rows}") });
    }
    Ok(Array2::from_shape_vec((dim, dim), data).expect("shape checked while parsing"))
}

/// Writes a matrix in the dense text format with 17 significant digits.
pub fn format_dense_matrix(w: &Array2<f64>) -> String {
    let mut out = format!("{}\n", w.nrows());
    for row in w.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Reads, validates and analyzes an externally supplied mixing matrix.
pub fn load_mixing_matrix(path: impl AsRef<Path>, graph: Option<&Graph>) -> Result<MixingMatrix> {
    let file = std::fs::File::open(path)?;
    read_mixing_matrix(file, graph)
}

pub fn read_mixing_matrix<R: Read>(reader: R, graph: Option<&Graph>) -> Result<MixingMatrix> {
    let w = parse_dense_matrix(reader)?;
    let mixing = MixingMatrix::new(w, LOADED_TOL)?;
    if let Some(g) = graph {
        mixing.check_pattern(g, LOADED_TOL)?;
    }
    Ok(mixing)
}
