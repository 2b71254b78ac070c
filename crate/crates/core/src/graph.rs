//! Undirected communication graphs between agents.
//!
//! Two random families are supported: geographic graphs (points uniform in the
//! unit square, linked when closer than a radius) and Erdős–Rényi graphs.
//! Graphs round-trip through a plain edge-list text format: the first
//! non-comment line holds `n`, every following line one `i j` pair.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{param, Error, Result};

/// How a graph was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphKind {
    Geographic { radius: f64 },
    Random { p: f64 },
    Explicit,
}

/// Undirected simple graph over agents `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// Sorted, deduplicated pairs with `i < j`.
    edges: Vec<(usize, usize)>,
    kind: GraphKind,
    positions: Option<Vec<[f64; 2]>>,
}

impl Graph {
    /// Builds a graph from an arbitrary pair list. Pairs are normalized to
    /// `i < j` and deduplicated; self-loops and out-of-range nodes are rejected.
    pub fn from_edges(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 2 {
            return param(format!("graph needs n >= 2 agents, got {n}"));
        }
        let mut set = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return param(format!("self-loop at node {a}"));
            }
            if a >= n || b >= n {
                return param(format!("edge ({a}, {b}) out of range for n = {n}"));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            n,
            edges: set.into_iter().collect(),
            kind: GraphKind::Explicit,
            positions: None,
        })
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::from_edges(n, std::iter::empty())
    }

    /// Union with the path `0 - 1 - ... - n-1`, which makes the graph connected.
    /// Kind and positions are kept.
    pub fn with_path(&self) -> Self {
        let mut set: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        set.extend((1..self.n).map(|i| (i - 1, i)));
        Self {
            edges: set.into_iter().collect(),
            ..self.clone()
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Subgraph on the same nodes keeping only the edges flagged in `keep`
    /// (indexed like [`Graph::edges`]).
    pub fn subgraph(&self, keep: &[bool]) -> Self {
        debug_assert_eq!(keep.len(), self.edges.len());
        Self {
            edges: self
                .edges
                .iter()
                .zip(keep)
                .filter_map(|(&e, &k)| k.then_some(e))
                .collect(),
            ..self.clone()
        }
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == self.n
    }

    /// Combinatorial Laplacian `D - A`. Entries are assembled as integers so
    /// every row sums to exactly zero.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut lap = vec![0i64; self.n * self.n];
        for &(i, j) in &self.edges {
            lap[i * self.n + j] -= 1;
            lap[j * self.n + i] -= 1;
            lap[i * self.n + i] += 1;
            lap[j * self.n + j] += 1;
        }
        DMatrix::from_row_iterator(self.n, self.n, lap.into_iter().map(|v| v as f64))
    }

    /// Serializes to the edge-list text format.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list format. Blank lines and `#` comments are ignored.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("edge list is empty".into()))?;
        let n: usize = header
            .parse()
            .map_err(|_| Error::Parse(format!("bad node count `{header}`")))?;
        let mut pairs = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => pairs.push((i, j)),
                _ => return Err(Error::Parse(format!("bad edge line `{line}`"))),
            }
        }
        Self::from_edges(n, pairs)
    }
}

/// Geographic graph: `n` points iid uniform on `[0,1]^2`, an edge wherever the
/// Euclidean distance is strictly below `radius`.
pub fn generate_geographic<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> Result<Graph> {
    if n < 2 {
        return param(format!("geographic graph needs n >= 2, got {n}"));
    }
    if !(radius > 0.0) {
        return param(format!("radius must be positive, got {radius}"));
    }
    let positions: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            if (dx * dx + dy * dy).sqrt() < radius {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph {
        n,
        edges,
        kind: GraphKind::Geographic { radius },
        positions: Some(positions),
    })
}

/// Erdős–Rényi `G(n, p)`: each pair linked independently with probability `p`.
pub fn generate_random<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Result<Graph> {
    if n < 2 {
        return param(format!("random graph needs n >= 2, got {n}"));
    }
    if !(0.0..=1.0).contains(&p) {
        return param(format!("link probability must lie in [0, 1], got {p}"));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    Ok(Graph {
        n,
        edges,
        kind: GraphKind::Random { p },
        positions: None,
    })
}

/// Draws graphs from `draw(attempt)` until one is connected.
///
/// Returns the graph together with the number of rejected draws. Gives up after
/// `max_attempts` rejections.
pub fn sample_connected<F>(mut draw: F, max_attempts: usize) -> Result<(Graph, usize)>
where
    F: FnMut(usize) -> Result<Graph>,
{
    for attempt in 0..max_attempts {
        let g = draw(attempt)?;
        if g.is_connected() {
            return Ok((g, attempt));
        }
    }
    Err(Error::Parameter(format!(
        "no connected graph after {max_attempts} draws; increase radius or link probability"
    )))
}
