//! System graph, hop distances, neighbor sets, index partitions and the
//! locality support masks that encode d-localized system responses.
//!
//! Vertices are 0-based. An edge `(i, j)` means the state of subsystem `i`
//! enters the dynamics of subsystem `j`, so a disturbance injected at `i`
//! reaches `j` after one step.

use std::collections::{BTreeSet, VecDeque};

use petgraph::unionfind::UnionFind;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::rng;

/// Sentinel distance for unreachable vertex pairs.
pub const UNREACHABLE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `{ j : dist(i, j) <= d }`
    Out,
    /// `{ j : dist(j, i) <= d }`
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct SystemGraph {
    num_vertices: usize,
    edges: BTreeSet<(usize, usize)>,
    dist: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    num_vertices: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphRecord> for SystemGraph {
    type Error = crate::error::Error;

    fn try_from(r: GraphRecord) -> Result<Self> {
        SystemGraph::new(r.num_vertices, r.edges)
    }
}

impl From<SystemGraph> for GraphRecord {
    fn from(g: SystemGraph) -> Self {
        GraphRecord {
            num_vertices: g.num_vertices,
            edges: g.edges.into_iter().collect(),
        }
    }
}

impl SystemGraph {
    /// Builds a directed graph; self loops are dropped.
    pub fn new(num_vertices: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= num_vertices || j >= num_vertices {
                return arg(format!("edge ({i}, {j}) out of range for {num_vertices} vertices"));
            }
            if i != j {
                set.insert((i, j));
            }
        }
        let dist = all_pairs_bfs(num_vertices, &set);
        Ok(Self {
            num_vertices,
            edges: set,
            dist,
        })
    }

    /// Each undirected pair is stored in both directions.
    pub fn undirected(num_vertices: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let both: Vec<_> = pairs.into_iter().flat_map(|(i, j)| [(i, j), (j, i)]).collect();
        Self::new(num_vertices, both)
    }

    /// Directed path `0 -> 1 -> ... -> n-1` with reverse edges.
    pub fn path(n: usize) -> Self {
        Self::undirected(n, (1..n).map(|i| (i - 1, i))).expect("path vertices in range")
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i, j))
    }

    /// Undirected pairs `(i, j)` with `i < j` present in either direction.
    pub fn undirected_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect()
    }

    /// Raw hop count, [`UNREACHABLE`] when no directed path exists.
    pub fn raw_dist(&self, i: usize, j: usize) -> usize {
        self.dist[i * self.num_vertices + j]
    }

    pub fn dist(&self, i: usize, j: usize) -> Option<usize> {
        match self.raw_dist(i, j) {
            UNREACHABLE => None,
            d => Some(d),
        }
    }

    /// Largest finite distance.
    pub fn diameter(&self) -> usize {
        self.dist.iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0)
    }

    pub fn d_neighbors(&self, i: usize, d: usize, direction: Direction) -> Result<BTreeSet<usize>> {
        if i >= self.num_vertices {
            return arg(format!("vertex {i} out of range for {} vertices", self.num_vertices));
        }
        Ok(self.neighbors_unchecked(i, d, direction))
    }

    pub(crate) fn neighbors_unchecked(&self, i: usize, d: usize, direction: Direction) -> BTreeSet<usize> {
        (0..self.num_vertices)
            .filter(|&j| {
                let h = match direction {
                    Direction::Out => self.raw_dist(i, j),
                    Direction::In => self.raw_dist(j, i),
                };
                h <= d
            })
            .collect()
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.dist.iter().all(|&d| d != UNREACHABLE)
    }
}

fn all_pairs_bfs(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
    }
    let mut dist = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        let row = &mut dist[s * n..(s + 1) * n];
        row[s] = 0;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if row[w] == UNREACHABLE {
                    row[w] = row[v] + 1;
                    queue.push_back(w);
                }
            }
        }
    }
    dist
}

/// Per-subsystem dimensions `(n_i, m_i)`.
pub type Dims = [(usize, usize)];

/// Index sets over the stacked system-response coordinates.
///
/// Within each time block, coordinates are laid out subsystem-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partitions {
    pub col_blocks: Vec<Vec<usize>>,
    pub row_blocks_x: Vec<Vec<usize>>,
    pub row_blocks_u: Vec<Vec<usize>>,
    pub terminal_blocks: Vec<Vec<usize>>,
}

pub fn state_offsets(dims: &Dims) -> Vec<usize> {
    offsets(dims.iter().map(|d| d.0))
}

pub fn input_offsets(dims: &Dims) -> Vec<usize> {
    offsets(dims.iter().map(|d| d.1))
}

fn offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    let mut out = Vec::new();
    for s in sizes {
        out.push(acc);
        acc += s;
    }
    out.push(acc);
    out
}

/// Subsystem owning each state coordinate (length `n`).
pub fn state_owner(dims: &Dims) -> Vec<usize> {
    dims.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, d.0)).collect()
}

/// Subsystem owning each input coordinate (length `m`).
pub fn input_owner(dims: &Dims) -> Vec<usize> {
    dims.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, d.1)).collect()
}

pub fn build_partitions(dims: &Dims, horizon: usize) -> Result<Partitions> {
    if dims.is_empty() {
        return arg("empty subsystem list");
    }
    if horizon == 0 {
        return arg("horizon must be at least 1");
    }
    if dims.iter().any(|&(n, m)| n == 0 || m == 0) {
        return arg("every subsystem needs n_i >= 1 and m_i >= 1");
    }
    let xo = state_offsets(dims);
    let uo = input_offsets(dims);
    let (n, m) = (xo[dims.len()], uo[dims.len()]);
    let mut p = Partitions {
        col_blocks: Vec::new(),
        row_blocks_x: Vec::new(),
        row_blocks_u: Vec::new(),
        terminal_blocks: Vec::new(),
    };
    for (i, &(ni, mi)) in dims.iter().enumerate() {
        let (x0, u0) = (xo[i], uo[i]);
        let xs: Vec<usize> = (0..=horizon)
            .flat_map(|t| (0..ni).map(move |a| t * n + x0 + a))
            .collect();
        let us: Vec<usize> = (0..horizon)
            .flat_map(|t| (0..mi).map(move |a| t * m + u0 + a))
            .collect();
        p.col_blocks.push(xs.clone());
        p.row_blocks_x.push(xs);
        p.row_blocks_u.push(us);
        p.terminal_blocks.push((0..ni).map(|a| xo[i] + a).collect());
    }
    Ok(p)
}

/// Row-major boolean support pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Support {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when every entry set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Support) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Allowed (structurally nonzero) entries of `Phi_x` and `Phi_u`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityMask {
    pub support_x: Support,
    pub support_u: Support,
}

/// BLT support intersected with the d-locality pattern: block `[Phi_x]^{ij}`
/// may be nonzero only when `dist(j, i) <= d`, `[Phi_u]^{ij}` when
/// `dist(j, i) <= d + 1`.
pub fn locality_mask(g: &SystemGraph, d: usize, dims: &Dims, horizon: usize) -> LocalityMask {
    let xo = state_owner(dims);
    let uo = input_owner(dims);
    let (n, m) = (xo.len(), uo.len());
    let cols = (horizon + 1) * n;
    let mut sx = Support::new(cols, cols);
    let mut su = Support::new(horizon * m, cols);
    for c in 0..cols {
        let (tc, j) = (c / n, xo[c % n]);
        for r in 0..cols {
            let (tr, i) = (r / n, xo[r % n]);
            sx.set(r, c, tr >= tc && g.raw_dist(j, i) <= d);
        }
        for r in 0..horizon * m {
            let (tr, i) = (r / m, uo[r % m]);
            su.set(r, c, tr >= tc && g.raw_dist(j, i) <= d.saturating_add(1));
        }
    }
    LocalityMask {
        support_x: sx,
        support_u: su,
    }
}

/// Row-major grid vertex id.
pub fn grid_vertex(cols: usize, r: usize, c: usize) -> usize {
    r * cols + c
}

/// Random spanning tree of a `rows x cols` grid: Kruskal on uniformly random
/// edge weights. Edges are returned in both directions.
pub fn random_spanning_tree(rows: usize, cols: usize, seed: u64) -> Result<SystemGraph> {
    if rows == 0 || cols == 0 {
        return arg("grid dimensions must be at least 1");
    }
    let n = rows * cols;
    let mut grid_edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = grid_vertex(cols, r, c);
            if c + 1 < cols {
                grid_edges.push((v, grid_vertex(cols, r, c + 1)));
            }
            if r + 1 < rows {
                grid_edges.push((v, grid_vertex(cols, r + 1, c)));
            }
        }
    }
    grid_edges.sort_unstable();
    let mut rng = rng::stream(seed, rng::STREAM_TREE);
    let mut weighted: Vec<(f64, usize)> = grid_edges
        .iter()
        .enumerate()
        .map(|(k, _)| (rng.random::<f64>(), k))
        .collect();
    weighted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    let mut uf = UnionFind::<usize>::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for (_, k) in weighted {
        let (a, b) = grid_edges[k];
        if uf.union(a, b) {
            tree.push((a, b));
        }
    }
    SystemGraph::undirected(n, tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path3_neighbors() {
        let g = SystemGraph::path(3);
        let all: BTreeSet<_> = [0, 1, 2].into();
        assert_eq!(g.d_neighbors(1, 1, Direction::Out).unwrap(), all);
        assert_eq!(g.d_neighbors(0, 0, Direction::In).unwrap(), [0].into());
        assert_eq!(g.d_neighbors(0, 1, Direction::Out).unwrap(), [0, 1].into());
        assert_eq!(g.dist(0, 2), Some(2));
        assert!(g.d_neighbors(3, 1, Direction::Out).is_err());
    }

    #[test]
    fn strong_connectivity() {
        assert!(SystemGraph::path(3).is_strongly_connected());
        let one_way = SystemGraph::new(2, [(0, 1)]).unwrap();
        assert!(!one_way.is_strongly_connected());
        assert_eq!(one_way.dist(1, 0), None);
    }

    #[test]
    fn partitions_tiny2() {
        let p = build_partitions(&[(1, 1), (1, 1)], 2).unwrap();
        assert_eq!(p.col_blocks, vec![vec![0, 2, 4], vec![1, 3, 5]]);
        assert_eq!(p.terminal_blocks, vec![vec![0], vec![1]]);
        assert_eq!(p.row_blocks_u, vec![vec![0, 2], vec![1, 3]]);
        let single = build_partitions(&[(2, 1)], 1).unwrap();
        assert_eq!(single.col_blocks, vec![vec![0, 1, 2, 3]]);
        assert!(build_partitions(&[], 2).is_err());
    }

    #[test]
    fn partitions_are_partitions() {
        let dims = [(2, 1), (1, 2), (3, 1)];
        let t = 3;
        let p = build_partitions(&dims, t).unwrap();
        let check = |fam: &Vec<Vec<usize>>, total: usize| {
            let mut all: Vec<usize> = fam.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..total).collect::<Vec<_>>());
        };
        check(&p.col_blocks, 6 * (t + 1));
        check(&p.row_blocks_x, 6 * (t + 1));
        check(&p.row_blocks_u, 4 * t);
        check(&p.terminal_blocks, 6);
        assert_eq!(p.row_blocks_u[1].len(), t * 2);
    }

    #[test]
    fn mask_zero_hop_is_block_diagonal() {
        let g = SystemGraph::path(3);
        let dims = [(1, 1); 3];
        let mask = locality_mask(&g, 0, &dims, 2);
        for r in 0..9 {
            for c in 0..9 {
                let expect = r / 3 >= c / 3 && r % 3 == c % 3;
                assert_eq!(mask.support_x.get(r, c), expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn mask_saturates_at_diameter() {
        let g = SystemGraph::path(3);
        let dims = [(1, 1); 3];
        let full = locality_mask(&g, g.diameter(), &dims, 2);
        for r in 0..9 {
            for c in 0..9 {
                assert_eq!(full.support_x.get(r, c), r / 3 >= c / 3);
            }
        }
        for r in 0..6 {
            for c in 0..9 {
                assert_eq!(full.support_u.get(r, c), r / 3 >= c / 3);
            }
        }
    }

    #[test]
    fn spanning_tree_small_grids() {
        let g = random_spanning_tree(1, 2, 3).unwrap();
        assert_eq!(g.undirected_pairs(), [(0, 1)].into());
        let g = random_spanning_tree(1, 1, 3).unwrap();
        assert!(g.edges().is_empty());
        assert!(random_spanning_tree(0, 3, 1).is_err());
    }
}
