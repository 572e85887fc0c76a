//! Communication graphs and synchronous neighbor averaging.
//!
//! The kernel uses max-degree weights: `W_ij = 1/(d+1)` on edges,
//! `1 - |N_i|/(d+1)` on the diagonal, zero elsewhere, where `d` is the
//! largest node degree. `W` is symmetric and doubly stochastic, so repeated
//! rounds `x <- W x` drive every node to the average of the initial values
//! while conserving their sum.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<usize>>),
    #[error("graph description: {0}")]
    Parse(String),
    #[error("no consensus after {iters} iterations (deviation {deviation:e})")]
    Timeout { iters: usize, deviation: f64, x: Vec<f64> },
}

fn format_components(components: &[Vec<usize>]) -> String {
    components
        .iter()
        .map(|c| format!("{c:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub type Result<T> = std::result::Result<T, ConsensusError>;

/// Undirected simple graph over nodes `0..num_nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    num_nodes: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CommGraph {
    /// Builds a graph, rejecting self-loops, duplicate and out-of-range edges.
    pub fn new(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(ConsensusError::InvalidArgument("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(ConsensusError::InvalidArgument(format!(
                    "edge ({a}, {b}) references a node outside 0..{num_nodes}"
                )));
            }
            if a == b {
                return Err(ConsensusError::InvalidArgument(format!("self-loop at node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(ConsensusError::InvalidArgument(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { num_nodes, edges: set })
    }

    /// Cycle `0-1-...-(n-1)-0`. Two nodes share a single edge; one node has none.
    pub fn ring(n: usize) -> Result<Self> {
        let edges: BTreeSet<(usize, usize)> = (0..n)
            .filter_map(|i| {
                let j = (i + 1) % n;
                (i != j).then(|| (i.min(j), i.max(j)))
            })
            .collect();
        Self::new(n, edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == node || b == node).count()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for node in 0..self.num_nodes {
            let root = find(&mut parent, node);
            groups.entry(root).or_default().push(node);
        }
        groups.into_values().collect()
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }

    /// Parses the edge-list text format: the first non-comment line holds the
    /// node count, every following line one `i j` pair. `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| ConsensusError::Parse("missing node-count header".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| ConsensusError::Parse(format!("bad node-count header {header:?}")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(ConsensusError::Parse(format!("expected `i j`, got {line:?}")));
            };
            let parse = |t: &str| t.parse::<usize>().map_err(|_| ConsensusError::Parse(format!("bad node id {t:?}")));
            edges.push((parse(a)?, parse(b)?));
        }
        Self::new(n, edges)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.num_nodes);
        for (a, b) in self.edges() {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }
}

/// Short topology names used on the command line: `ring:N`, `complete:N`,
/// `path:N`.
impl FromStr for CommGraph {
    type Err = ConsensusError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| ConsensusError::Parse(format!("expected kind:N, got {s:?}")))?;
        let n: usize = n
            .parse()
            .map_err(|_| ConsensusError::Parse(format!("bad node count in {s:?}")))?;
        match kind {
            "ring" => Self::ring(n),
            "complete" => Self::complete(n),
            "path" => Self::path(n),
            other => Err(ConsensusError::Parse(format!("unknown topology {other:?}"))),
        }
    }
}

/// Max-degree averaging matrix for a connected [`CommGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusKernel {
    n: usize,
    degree: usize,
    weights: Vec<f64>,
    /// Per node: `(j, W_ij)` for every nonzero entry in row `i`, self first.
    support: Vec<Vec<(usize, f64)>>,
}

impl ConsensusKernel {
    pub fn build(graph: &CommGraph) -> Result<Self> {
        let components = graph.components();
        if components.len() > 1 {
            return Err(ConsensusError::Disconnected(components));
        }
        let n = graph.num_nodes();
        let degrees: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();
        let d = degrees.iter().copied().max().unwrap_or(0);
        let edge_weight = 1.0 / (d as f64 + 1.0);
        let mut weights = vec![0.0; n * n];
        for (a, b) in graph.edges() {
            weights[a * n + b] = edge_weight;
            weights[b * n + a] = edge_weight;
        }
        for (i, &deg) in degrees.iter().enumerate() {
            weights[i * n + i] = 1.0 - deg as f64 / (d as f64 + 1.0);
        }
        let support = (0..n)
            .map(|i| {
                std::iter::once(i)
                    .chain(graph.neighbors(i))
                    .map(|j| (j, weights[i * n + j]))
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            })
            .collect();
        Ok(Self {
            n,
            degree: d,
            weights,
            support,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Graph degree `d` (largest node degree).
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    /// Row-major `N x N` matrix.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nonzero entries of row `i` as `(j, W_ij)`.
    pub fn row_support(&self, i: usize) -> &[(usize, f64)] {
        &self.support[i]
    }

    /// One synchronous round `x <- W x`.
    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(ConsensusError::InvalidArgument(format!(
                "vector of length {} for {} nodes",
                x.len(),
                self.n
            )));
        }
        Ok(self.step_by(|_, j| x[j]))
    }

    /// One round where node `i` obtains node `j`'s pre-round value through
    /// `read(i, j)`. Only pairs with `W_ij != 0` are ever requested.
    pub fn step_by(&self, mut read: impl FnMut(usize, usize) -> f64) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.support[i].iter().map(|&(j, w)| w * read(i, j)).sum())
            .collect()
    }

    /// Repeats rounds until every entry is within `tol` of the initial mean.
    pub fn run_to_consensus(&self, x0: &[f64], tol: f64, max_iters: usize) -> Result<ConsensusRun> {
        if !(tol > 0.0) {
            return Err(ConsensusError::InvalidArgument(format!("tolerance {tol} must be positive")));
        }
        let mut x = self.step(x0).map(|_| x0.to_vec())?;
        let mean = x0.iter().sum::<f64>() / self.n as f64;
        let mut iters = 0;
        loop {
            let deviation = max_deviation(&x, mean);
            if deviation < tol {
                return Ok(ConsensusRun { x, iters, mean });
            }
            if iters >= max_iters {
                return Err(ConsensusError::Timeout { iters, deviation, x });
            }
            x = self.step_by(|_, j| x[j]);
            iters += 1;
        }
    }
}

/// Largest `|x_i - mean|`.
pub fn max_deviation(x: &[f64], mean: f64) -> f64 {
    x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max)
}

/// Result of [`ConsensusKernel::run_to_consensus`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRun {
    pub x: Vec<f64>,
    pub iters: usize,
    /// Mean of the initial values, the limit every node approaches.
    pub mean: f64,
}

impl fmt::Display for ConsensusRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "limit {} after {} iterations", self.mean, self.iters)
    }
}
