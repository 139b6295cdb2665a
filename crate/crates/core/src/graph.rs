//! Finite graphs with lazily cached BFS distances, lattice balls and the
//! interaction decay profile `J`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance value for vertices in different connected components.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("self edge at vertex {0}")]
    SelfEdge(usize),
    #[error("duplicate edge {0}-{1}")]
    MultiEdge(usize, usize),
    #[error("vertex {vertex} out of range (graph has {count} vertices)")]
    OutOfRange { vertex: usize, count: usize },
    #[error("edge list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeKind {
    Square,
    Triangular,
}

/// Undirected simple graph in CSR form with a designated origin.
#[derive(Debug)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    origin: usize,
    coords: Option<Vec<[i32; 2]>>,
    rows: Vec<OnceLock<Box<[u32]>>>,
}

impl Clone for Graph {
    fn clone(&self) -> Self {
        Self::from_csr(self.offsets.clone(), self.neighbors.clone(), self.origin, self.coords.clone())
    }
}

impl Graph {
    fn from_csr(offsets: Vec<usize>, neighbors: Vec<u32>, origin: usize, coords: Option<Vec<[i32; 2]>>) -> Self {
        let n = offsets.len() - 1;
        Self { offsets, neighbors, origin, coords, rows: (0..n).map(|_| OnceLock::new()).collect() }
    }

    /// Builds a graph from an undirected edge list, rejecting self and repeated edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], origin: usize) -> Result<Self, GraphError> {
        if origin >= n.max(1) {
            return Err(GraphError::OutOfRange { vertex: origin, count: n });
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            for v in [a, b] {
                if v >= n {
                    return Err(GraphError::OutOfRange { vertex: v, count: n });
                }
            }
            if a == b {
                return Err(GraphError::SelfEdge(a));
            }
            if adj[a].contains(&(b as u32)) {
                return Err(GraphError::MultiEdge(a.min(b), a.max(b)));
            }
            adj[a].push(b as u32);
            adj[b].push(a as u32);
        }
        Ok(Self::from_adjacency(adj, origin, None))
    }

    fn from_adjacency(mut adj: Vec<Vec<u32>>, origin: usize, coords: Option<Vec<[i32; 2]>>) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            neighbors.extend_from_slice(row);
            offsets.push(neighbors.len());
        }
        Self::from_csr(offsets, neighbors, origin, coords)
    }

    /// The ball of radius `n` around the origin of the square or triangular
    /// lattice. Vertices are ordered by shell, so the origin is vertex 0.
    pub fn lattice_ball(kind: LatticeKind, n: usize) -> Self {
        let n = n as i32;
        let steps: &[(i32, i32)] = match kind {
            LatticeKind::Square => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            LatticeKind::Triangular => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)],
        };
        let norm = |p: [i32; 2]| -> i32 {
            match kind {
                LatticeKind::Square => p[0].abs() + p[1].abs(),
                LatticeKind::Triangular => (p[0].abs() + p[1].abs() + (p[0] + p[1]).abs()) / 2,
            }
        };
        let mut pts: Vec<[i32; 2]> = Vec::new();
        for x in -n..=n {
            for y in -n..=n {
                if norm([x, y]) <= n {
                    pts.push([x, y]);
                }
            }
        }
        pts.sort_by_key(|p| (norm(*p), p[0], p[1]));
        let index: BTreeMap<[i32; 2], u32> = pts.iter().enumerate().map(|(i, p)| (*p, i as u32)).collect();
        let adj = pts
            .iter()
            .map(|p| {
                steps.iter().filter_map(|(dx, dy)| index.get(&[p[0] + dx, p[1] + dy]).copied()).collect()
            })
            .collect();
        Self::from_adjacency(adj, 0, Some(pts))
    }

    /// Complete graph on `n` vertices.
    pub fn complete(n: usize) -> Self {
        let adj = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| j as u32).collect()).collect();
        Self::from_adjacency(adj, 0, None)
    }

    /// Path graph `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges, 0).expect("path edges are simple")
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.vertex_count()).map(|i| self.degree(i)).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Lattice coordinates, when the graph was built as a lattice ball.
    pub fn coords(&self) -> Option<&[[i32; 2]]> {
        self.coords.as_deref()
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&(j as u32)).is_ok()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.vertex_count())
            .flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j as usize)))
            .filter(|(i, j)| i < j)
    }

    /// Fresh BFS distances from `src`, not cached.
    pub fn bfs_row(&self, src: usize) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.vertex_count()];
        let mut queue = VecDeque::new();
        dist[src] = 0;
        queue.push_back(src);
        while let Some(v) = queue.pop_front() {
            let dv = dist[v];
            for &w in self.neighbors(v) {
                let w = w as usize;
                if dist[w] == UNREACHABLE {
                    dist[w] = dv + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Cached distance row from `src`.
    pub fn dist_row(&self, src: usize) -> &[u32] {
        self.rows[src].get_or_init(|| self.bfs_row(src).into_boxed_slice())
    }

    pub fn dist(&self, i: usize, j: usize) -> u32 {
        self.dist_row(i)[j]
    }

    /// Vertices at distance exactly `n` from `j`.
    pub fn sphere(&self, j: usize, n: u32) -> Vec<usize> {
        self.dist_row(j).iter().enumerate().filter(|(_, &d)| d == n).map(|(v, _)| v).collect()
    }

    /// Vertices at distance at most `n` from `j`.
    pub fn ball(&self, j: usize, n: u32) -> Vec<usize> {
        self.dist_row(j).iter().enumerate().filter(|(_, &d)| d <= n).map(|(v, _)| v).collect()
    }

    /// Indicator vector of the ball of radius `n` around `j`.
    pub fn ball_mask(&self, j: usize, n: u32) -> Vec<bool> {
        self.dist_row(j).iter().map(|&d| d <= n).collect()
    }

    /// `#Σ(j, k)` for `k = 0..=n_max`.
    pub fn sphere_sizes(&self, j: usize, n_max: usize) -> Vec<usize> {
        let mut sizes = vec![0; n_max + 1];
        for &d in self.dist_row(j) {
            if (d as usize) <= n_max {
                sizes[d as usize] += 1;
            }
        }
        sizes
    }

    pub fn eccentricity(&self, j: usize) -> u32 {
        self.dist_row(j).iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0)
    }

    /// Parses the text edge-list format: a `vertices N` header, an optional
    /// `origin K` line, then one `i j` pair per line. `#` starts a comment.
    pub fn parse_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut count = None;
        let mut origin = 0;
        let mut edges = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| GraphError::Parse { line: ln + 1, msg: msg.to_string() };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["vertices", n] => count = Some(n.parse::<usize>().map_err(|_| err("bad vertex count"))?),
                ["origin", k] => origin = k.parse::<usize>().map_err(|_| err("bad origin"))?,
                [a, b] => {
                    if count.is_none() {
                        return Err(err("edge before `vertices` header"));
                    }
                    let a = a.parse::<usize>().map_err(|_| err("bad vertex index"))?;
                    let b = b.parse::<usize>().map_err(|_| err("bad vertex index"))?;
                    edges.push((a, b));
                }
                _ => return Err(err("expected `i j`")),
            }
        }
        let n = count.ok_or(GraphError::Parse { line: 0, msg: "missing `vertices` header".into() })?;
        Self::from_edges(n, &edges, origin)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = format!("vertices {}\norigin {}\n", self.vertex_count(), self.origin);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }
}

/// Outcome of the empirical bi-dimensionality check.
#[derive(Debug, Clone, Serialize)]
pub struct BidimensionalReport {
    pub degree_bound: usize,
    /// `sup_{j, 1<=n<=n_max} #Σ(j,n)/n`, zero when every sphere is empty.
    pub sup_sphere_ratio: f64,
    /// `max_j #Σ(j,n)/n` for each tested `n` (index `n-1`).
    pub ratio_by_n: Vec<f64>,
    /// Set when the per-`n` ratio keeps increasing over the last third of
    /// the tested range, which is how superlinear sphere growth shows up on
    /// a finite truncation.
    pub superlinear_flag: bool,
}

/// Scans sphere sizes from every vertex up to radius `n_max`.
pub fn check_bidimensional(g: &Graph, n_max: usize) -> BidimensionalReport {
    let per_vertex: Vec<Vec<usize>> =
        (0..g.vertex_count()).into_par_iter().map(|j| sphere_counts(&g.bfs_row(j), n_max)).collect();
    let ratio_by_n: Vec<f64> = (1..=n_max)
        .map(|n| per_vertex.iter().map(|s| s[n] as f64 / n as f64).fold(0.0, f64::max))
        .collect();
    let sup = ratio_by_n.iter().copied().fold(0.0, f64::max);
    let tail = &ratio_by_n[ratio_by_n.len() * 2 / 3..];
    let superlinear_flag =
        tail.len() >= 3 && tail.windows(2).all(|w| w[1] > w[0] * (1.0 + 1e-9)) && tail[tail.len() - 1] > 0.0;
    BidimensionalReport { degree_bound: g.max_degree(), sup_sphere_ratio: sup, ratio_by_n, superlinear_flag }
}

fn sphere_counts(row: &[u32], n_max: usize) -> Vec<usize> {
    let mut s = vec![0; n_max + 1];
    for &d in row {
        if (d as usize) <= n_max {
            s[d as usize] += 1;
        }
    }
    s
}

/// The pair coupling `J(r)` as a function of graph distance. `J(0)` is
/// always zero: same-vertex pairs interact through `U2` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecayProfile {
    Zero,
    /// `J(r) = amp * 1(r = 1)`.
    Nearest { amp: f64 },
    /// `J(r) = amp * r^{-p}`.
    Power { amp: f64, p: f64 },
    /// `J(r) = table[r - 1]` for `r <= table.len()`, zero beyond.
    Table { table: Vec<f64> },
}

impl DecayProfile {
    pub fn value(&self, r: u32) -> f64 {
        if r == 0 || r == UNREACHABLE {
            return 0.0;
        }
        match self {
            Self::Zero => 0.0,
            Self::Nearest { amp } => {
                if r == 1 {
                    *amp
                } else {
                    0.0
                }
            }
            Self::Power { amp, p } => amp * (r as f64).powf(-p),
            Self::Table { table } => table.get(r as usize - 1).copied().unwrap_or(0.0),
        }
    }

    /// Largest `r` with `J(r) > 0`, `None` for unbounded range.
    pub fn support_radius(&self) -> Option<u32> {
        match self {
            Self::Zero => Some(0),
            Self::Nearest { amp } => Some(u32::from(*amp != 0.0)),
            Self::Power { amp, .. } => (*amp == 0.0).then_some(0),
            Self::Table { table } => Some(table.iter().rposition(|&v| v != 0.0).map_or(0, |i| i as u32 + 1)),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.support_radius() == Some(0)
    }

    /// Checks `J >= 0` and nonincreasing on `1..=r_max`.
    pub fn validate(&self, r_max: u32) -> Result<(), String> {
        let mut prev = f64::INFINITY;
        for r in 1..=r_max.max(1) {
            let v = self.value(r);
            if !(v >= 0.0) {
                return Err(format!("J({r}) = {v} is negative"));
            }
            if v > prev {
                return Err(format!("J not monotone at r = {r}"));
            }
            prev = v;
        }
        Ok(())
    }
}

fn sup_weighted_sum(profile: &DecayProfile, g: &Graph, weight: impl Fn(u32) -> f64 + Sync) -> f64 {
    if profile.is_zero() {
        return 0.0;
    }
    (0..g.vertex_count())
        .into_par_iter()
        .map(|j| g.dist_row(j).iter().map(|&d| profile.value(d) * weight(d)).sum::<f64>())
        .reduce(|| 0.0, f64::max)
}

/// `J̄(l) = sup_j Σ_{j'} J(d(j,j')) 1(d(j,j') >= l)` on the finite graph.
pub fn jbar(profile: &DecayProfile, g: &Graph, l: u32) -> f64 {
    sup_weighted_sum(profile, g, |d| if d >= l { 1.0 } else { 0.0 })
}

/// `J* = sup_j Σ_{j'} J(d(j,j')) d(j,j')^2`.
pub fn jstar(profile: &DecayProfile, g: &Graph) -> f64 {
    sup_weighted_sum(profile, g, |d| (d as f64) * (d as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floyd_warshall(g: &Graph) -> Vec<Vec<u32>> {
        let n = g.vertex_count();
        let inf = UNREACHABLE / 2;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
            for &j in g.neighbors(i) {
                d[i][j as usize] = 1;
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn square_ball_counts() {
        assert_eq!(Graph::lattice_ball(LatticeKind::Square, 0).vertex_count(), 1);
        let g = Graph::lattice_ball(LatticeKind::Square, 2);
        assert_eq!(g.vertex_count(), 13);
        assert_eq!(g.sphere(g.origin(), 2).len(), 8);
        for n in 0..=50 {
            let g = Graph::lattice_ball(LatticeKind::Square, n);
            assert_eq!(g.vertex_count(), 2 * n * n + 2 * n + 1);
        }
    }

    #[test]
    fn triangular_ball_counts() {
        for n in 0..=12 {
            let g = Graph::lattice_ball(LatticeKind::Triangular, n);
            assert_eq!(g.vertex_count(), 3 * n * n + 3 * n + 1);
            assert_eq!(g.degree(0), if n == 0 { 0 } else { 6 });
        }
    }

    #[test]
    fn bidimensional_reports() {
        let g = Graph::lattice_ball(LatticeKind::Square, 10);
        let rep = check_bidimensional(&g, 10);
        assert_eq!(rep.degree_bound, 4);
        // From the centre every sphere holds 4n points; off-centre vertices
        // of a truncated ball never see more.
        let centre = g.sphere_sizes(0, 10);
        for n in 1..=10 {
            assert_eq!(centre[n], 4 * n);
        }
        assert!(rep.sup_sphere_ratio >= 4.0);
        assert!(!rep.superlinear_flag);

        let single = check_bidimensional(&Graph::lattice_ball(LatticeKind::Square, 0), 5);
        assert_eq!(single.sup_sphere_ratio, 0.0);

        let k5 = Graph::complete(5);
        let rep = check_bidimensional(&k5, 3);
        assert_eq!(rep.degree_bound, 4);
        assert_eq!(k5.sphere(0, 1).len(), 4);
        assert!(k5.sphere(0, 2).is_empty());
        assert_eq!(rep.ratio_by_n, vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn decay_sums() {
        let g = Graph::lattice_ball(LatticeKind::Square, 3);
        assert_eq!(jbar(&DecayProfile::Zero, &g, 1), 0.0);
        assert_eq!(jstar(&DecayProfile::Zero, &g), 0.0);
        let nn = DecayProfile::Nearest { amp: 1.0 };
        assert_eq!(jbar(&nn, &g, 1), 4.0);
        assert_eq!(jstar(&nn, &g), 4.0);
        let pw = DecayProfile::Power { amp: 1.0, p: 4.0 };
        assert_eq!(jbar(&pw, &g, 100), 0.0);

        let g8 = Graph::lattice_ball(LatticeKind::Square, 8);
        let mut brute: f64 = 0.0;
        for j in 0..g8.vertex_count() {
            let mut s = 0.0;
            for k in 0..g8.vertex_count() {
                let d = g8.dist(j, k);
                if d > 0 {
                    s += (d as f64).powi(-4) * (d as f64).powi(2);
                }
            }
            brute = brute.max(s);
        }
        assert!((jstar(&pw, &g8) - brute).abs() < 1e-12);
    }

    #[test]
    fn edge_list_roundtrip_and_errors() {
        let g = Graph::lattice_ball(LatticeKind::Triangular, 2);
        let h = Graph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(h.vertex_count(), g.vertex_count());
        assert_eq!(h.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
        assert_eq!(Graph::from_edges(2, &[(0, 0)], 0).unwrap_err(), GraphError::SelfEdge(0));
        assert_eq!(Graph::from_edges(2, &[(0, 1), (1, 0)], 0).unwrap_err(), GraphError::MultiEdge(0, 1));
        assert!(Graph::parse_edge_list("0 1\n").is_err());
        assert!(Graph::parse_edge_list("vertices 3 # header\n0 1\n1 2\n").is_ok());
    }

    #[test]
    fn decay_validation() {
        assert!(DecayProfile::Power { amp: 1.0, p: 2.0 }.validate(20).is_ok());
        assert!(DecayProfile::Table { table: vec![1.0, 2.0] }.validate(3).is_err());
        assert_eq!(DecayProfile::Table { table: vec![1.0, 0.5, 0.0] }.support_radius(), Some(2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bfs_matches_floyd_warshall(n in 2usize..40, extra in proptest::collection::vec((0usize..40, 0usize..40), 0..60)) {
            let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
            for (a, b) in extra {
                let (a, b) = (a % n, b % n);
                if a != b && !edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
                    edges.push((a, b));
                }
            }
            let g = Graph::from_edges(n, &edges, 0).unwrap();
            let fw = floyd_warshall(&g);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g.dist(i, j), fw[i][j]);
                    prop_assert_eq!(g.dist(i, j) == 1, g.is_edge(i, j));
                    for k in 0..n {
                        prop_assert!(g.dist(i, k) <= g.dist(i, j) + g.dist(j, k));
                    }
                }
            }
        }

        #[test]
        fn spheres_partition_balls(n in 0usize..9, tri in any::<bool>(), j_seed in 0usize..1000) {
            let kind = if tri { LatticeKind::Triangular } else { LatticeKind::Square };
            let g = Graph::lattice_ball(kind, n);
            let j = j_seed % g.vertex_count();
            for r in 0..=(2 * n as u32 + 1) {
                let mut shell = g.ball(j, r);
                if r > 0 {
                    let inner = g.ball(j, r - 1);
                    shell.retain(|v| !inner.contains(v));
                }
                prop_assert_eq!(shell, g.sphere(j, r));
            }
        }

        #[test]
        fn jbar_nonincreasing(n in 1usize..7, p in 1.0f64..5.0) {
            let g = Graph::lattice_ball(LatticeKind::Square, n);
            let prof = DecayProfile::Power { amp: 1.0, p };
            let vals: Vec<f64> = (0..(2 * n as u32 + 2)).map(|l| jbar(&prof, &g, l)).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            prop_assert_eq!(*vals.last().unwrap(), 0.0);
        }
    }
}
