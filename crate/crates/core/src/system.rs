//! Coupled LTV network model, its stacked (lifted) form, and the swing
//! equation power-grid generator.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng;
use crate::topology::{input_offsets, random_spanning_tree, state_offsets, SystemGraph};

/// `x_{t+1} = A_t x_t + B_t u_t + w_t` over `N` subsystems, `t = 0..T-1`.
/// `A_t` is stored globally (n x n); `B_t` globally (n x m) and must be block
/// diagonal in the subsystem partition.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvNetwork {
    dims: Vec<(usize, usize)>,
    horizon: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

impl LtvNetwork {
    pub fn new(dims: Vec<(usize, usize)>, a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&(n, m)| n == 0 || m == 0) {
            return arg("subsystem dimensions must be positive");
        }
        let horizon = a.len();
        if horizon == 0 || b.len() != horizon {
            return arg("need one (A_t, B_t) pair per step and at least one step");
        }
        let xo = state_offsets(&dims);
        let uo = input_offsets(&dims);
        let (n, m) = (xo[dims.len()], uo[dims.len()]);
        for t in 0..horizon {
            if a[t].shape() != (n, n) || b[t].shape() != (n, m) {
                return Err(Error::Dimension(format!(
                    "step {t}: A is {:?}, B is {:?}, expected ({n},{n}) and ({n},{m})",
                    a[t].shape(),
                    b[t].shape()
                )));
            }
            for i in 0..dims.len() {
                for j in 0..dims.len() {
                    if i == j {
                        continue;
                    }
                    let blk = b[t].view((xo[i], uo[j]), (dims[i].0, dims[j].1));
                    if blk.iter().any(|v| *v != 0.0) {
                        return arg(format!("B_{t} couples subsystem {i} to input of {j}"));
                    }
                }
            }
        }
        Ok(Self { dims, horizon, a, b })
    }

    /// One `(A, B)` pair reused for every step.
    pub fn time_invariant(dims: Vec<(usize, usize)>, horizon: usize, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        Self::new(dims, vec![a; horizon], vec![b; horizon])
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_subsystems(&self) -> usize {
        self.dims.len()
    }

    pub fn n(&self) -> usize {
        self.dims.iter().map(|d| d.0).sum()
    }

    pub fn m(&self) -> usize {
        self.dims.iter().map(|d| d.1).sum()
    }

    pub fn a(&self, t: usize) -> &DMatrix<f64> {
        &self.a[t]
    }

    pub fn b(&self, t: usize) -> &DMatrix<f64> {
        &self.b[t]
    }

    /// `A_t^{ij}`: effect of subsystem `j`'s state on subsystem `i`.
    pub fn a_block(&self, t: usize, i: usize, j: usize) -> DMatrix<f64> {
        let xo = state_offsets(&self.dims);
        self.a[t]
            .view((xo[i], xo[j]), (self.dims[i].0, self.dims[j].0))
            .clone_owned()
    }

    pub fn b_block(&self, t: usize, i: usize) -> DMatrix<f64> {
        let xo = state_offsets(&self.dims);
        let uo = input_offsets(&self.dims);
        self.b[t]
            .view((xo[i], uo[i]), (self.dims[i].0, self.dims[i].1))
            .clone_owned()
    }

    /// Graph with edge `(i, j)` whenever some `A_t^{ji}` is nonzero.
    pub fn coupling_graph(&self) -> SystemGraph {
        let n_sub = self.num_subsystems();
        let mut edges = Vec::new();
        for i in 0..n_sub {
            for j in 0..n_sub {
                if i != j && (0..self.horizon).any(|t| self.a_block(t, j, i).iter().any(|v| *v != 0.0)) {
                    edges.push((i, j));
                }
            }
        }
        SystemGraph::new(n_sub, edges).expect("subsystem indices in range")
    }

    /// Every coupling in the dynamics is an edge of `g`.
    pub fn is_consistent_with(&self, g: &SystemGraph) -> bool {
        g.num_vertices() == self.num_subsystems()
            && self.coupling_graph().edges().iter().all(|e| g.edges().contains(e))
    }

    /// One step of the true dynamics.
    pub fn step(&self, t: usize, x: &nalgebra::DVector<f64>, u: &nalgebra::DVector<f64>, w: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        &self.a[t] * x + &self.b[t] * u + w
    }
}

/// Lifted dynamics `x = ZA x + ZB u + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDynamics {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// `(T+1)n x (T+1)n`, block `(t+1, t)` equal to `A_t`.
    pub za: DMatrix<f64>,
    /// `(T+1)n x Tm`, block `(t+1, t)` equal to `B_t`.
    pub zb: DMatrix<f64>,
}

impl StackedDynamics {
    /// `[I - ZA, -ZB]`.
    pub fn z_ab(&self) -> DMatrix<f64> {
        let rows = self.za.nrows();
        let mut out = DMatrix::zeros(rows, rows + self.zb.ncols());
        out.view_mut((0, 0), (rows, rows))
            .copy_from(&(DMatrix::identity(rows, rows) - &self.za));
        out.view_mut((0, rows), (rows, self.zb.ncols())).copy_from(&(-&self.zb));
        out
    }

    pub fn state_len(&self) -> usize {
        (self.horizon + 1) * self.n
    }

    pub fn input_len(&self) -> usize {
        self.horizon * self.m
    }
}

pub fn stack_dynamics(net: &LtvNetwork) -> StackedDynamics {
    let (n, m, t_h) = (net.n(), net.m(), net.horizon());
    let mut za = DMatrix::zeros((t_h + 1) * n, (t_h + 1) * n);
    let mut zb = DMatrix::zeros((t_h + 1) * n, t_h * m);
    for t in 0..t_h {
        za.view_mut(((t + 1) * n, t * n), (n, n)).copy_from(net.a(t));
        zb.view_mut(((t + 1) * n, t * m), (n, m)).copy_from(net.b(t));
    }
    StackedDynamics { n, m, horizon: t_h, za, zb }
}

/// Uniform sampling ranges for the swing generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwingRanges {
    pub coupling: (f64, f64),
    pub damping: (f64, f64),
    pub inertia: (f64, f64),
}

impl Default for SwingRanges {
    fn default() -> Self {
        Self {
            coupling: (0.5, 1.0),
            damping: (0.2, 0.8),
            inertia: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingParams {
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    /// Symmetric coupling keyed by `(i, j)` with `i < j`.
    #[serde(with = "coupling_list")]
    pub coupling: BTreeMap<(usize, usize), f64>,
    pub dt: f64,
}

/// Stores the coupling map as `[i, j, k]` triples, since tuple keys are not
/// valid JSON object keys.
mod coupling_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<(usize, usize), f64>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<(usize, usize, f64)> = map.iter().map(|(&(i, j), &k)| (i, j, k)).collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(usize, usize), f64>, D::Error> {
        let list = Vec::<(usize, usize, f64)>::deserialize(d)?;
        Ok(list.into_iter().map(|(i, j, k)| ((i.min(j), i.max(j)), k)).collect())
    }
}

impl SwingParams {
    pub fn coupling_between(&self, i: usize, j: usize) -> f64 {
        self.coupling.get(&(i.min(j), i.max(j))).copied().unwrap_or(0.0)
    }

    /// `k^i = sum_j k^{ij}`.
    pub fn aggregate_coupling(&self, i: usize) -> f64 {
        self.coupling
            .iter()
            .filter(|(&(a, b), _)| a == i || b == i)
            .map(|(_, k)| k)
            .sum()
    }

    pub fn sample(graph: &SystemGraph, ranges: &SwingRanges, dt: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::STREAM_SWING);
        let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let coupling = graph
            .undirected_pairs()
            .into_iter()
            .map(|e| (e, uniform(ranges.coupling)))
            .collect();
        let mut damping = Vec::new();
        let mut inertia = Vec::new();
        for _ in 0..graph.num_vertices() {
            damping.push(uniform(ranges.damping));
            inertia.push(uniform(ranges.inertia));
        }
        Self {
            inertia,
            damping,
            coupling,
            dt,
        }
    }

    /// `A^{ii} = [[1, dt], [-(k^i/m^i) dt, 1 - (d^i/m^i) dt]]`,
    /// `A^{ij} = [[0, 0], [(k^{ij}/m^i) dt, 0]]`, `B^i = [1, 0]^T`.
    pub fn network(&self, horizon: usize) -> Result<LtvNetwork> {
        let n_sub = self.inertia.len();
        let dt = self.dt;
        let mut a = DMatrix::zeros(2 * n_sub, 2 * n_sub);
        let mut b = DMatrix::zeros(2 * n_sub, n_sub);
        for i in 0..n_sub {
            let (mi, di, ki) = (self.inertia[i], self.damping[i], self.aggregate_coupling(i));
            a[(2 * i, 2 * i)] = 1.0;
            a[(2 * i, 2 * i + 1)] = dt;
            a[(2 * i + 1, 2 * i)] = -(ki / mi) * dt;
            a[(2 * i + 1, 2 * i + 1)] = 1.0 - (di / mi) * dt;
            b[(2 * i, i)] = 1.0;
        }
        for (&(i, j), &k) in &self.coupling {
            a[(2 * i + 1, 2 * j)] = (k / self.inertia[i]) * dt;
            a[(2 * j + 1, 2 * i)] = (k / self.inertia[j]) * dt;
        }
        LtvNetwork::time_invariant(vec![(2, 1); n_sub], horizon, a, b)
    }
}

/// Swing-equation grid on a random spanning tree of a `rows x cols` grid.
pub fn swing_grid(
    rows: usize,
    cols: usize,
    horizon: usize,
    seed: u64,
    dt: f64,
    ranges: &SwingRanges,
) -> Result<(LtvNetwork, SystemGraph, SwingParams)> {
    let graph = random_spanning_tree(rows, cols, seed)?;
    let params = SwingParams::sample(&graph, ranges, dt, seed);
    let net = params.network(horizon)?;
    Ok((net, graph, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn scalar_stack() {
        let net = LtvNetwork::time_invariant(
            vec![(1, 1)],
            1,
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let sd = stack_dynamics(&net);
        assert_eq!(sd.za, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.5, 0.0]));
        assert_eq!(sd.zb, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn zero_dynamics_z_ab() {
        let net = LtvNetwork::time_invariant(
            vec![(1, 1), (1, 1)],
            2,
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        let z = stack_dynamics(&net).z_ab();
        assert_eq!(z.shape(), (6, 10));
        assert_eq!(z.view((0, 0), (6, 6)).clone_owned(), DMatrix::identity(6, 6));
        assert!(z.view((0, 6), (6, 4)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_coupled_inputs() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let r = LtvNetwork::time_invariant(vec![(1, 1), (1, 1)], 1, DMatrix::zeros(2, 2), b);
        assert!(r.is_err());
    }

    #[test]
    fn swing_diagonal_block() {
        let params = SwingParams {
            inertia: vec![1.0, 1.0],
            damping: vec![0.5, 0.5],
            coupling: [((0, 1), 1.0)].into(),
            dt: 0.2,
        };
        let net = params.network(3).unwrap();
        let aii = net.a_block(0, 0, 0);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.2, 0.9]);
        assert!((aii - expect).norm() < 1e-15);
        let aij = net.a_block(0, 0, 1);
        assert_eq!(aij[(0, 0)], 0.0);
        assert_eq!(aij[(0, 1)], 0.0);
        assert!((aij[(1, 0)] - 0.2).abs() < 1e-15);
        assert_eq!(net.b_block(0, 1), DMatrix::from_row_slice(2, 1, &[1.0, 0.0]));
    }

    #[test]
    fn swing_grid_shapes() {
        let (net, g, p) = swing_grid(6, 6, 10, 7, 0.2, &SwingRanges::default()).unwrap();
        assert_eq!(net.num_subsystems(), 36);
        assert_eq!((net.n(), net.m()), (72, 36));
        assert_eq!(g.undirected_pairs().len(), 35);
        assert!(net.is_consistent_with(&g));
        for i in 0..36 {
            assert!(p.inertia[i] > 0.0);
            for j in 0..36 {
                if i != j && !g.has_edge(i, j) {
                    assert!(net.a_block(0, i, j).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn stacked_relation_matches_stepping() {
        let (net, _, _) = swing_grid(2, 2, 4, 11, 0.2, &SwingRanges::default()).unwrap();
        let sd = stack_dynamics(&net);
        let (n, m, t_h) = (net.n(), net.m(), net.horizon());
        let mut rng = crate::rng::stream(5, 99);
        let mut draw = |k: usize| DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let x0 = draw(n);
        let us: Vec<_> = (0..t_h).map(|_| draw(m)).collect();
        let ws: Vec<_> = (0..t_h).map(|_| draw(n)).collect();
        let mut xs = vec![x0.clone()];
        for t in 0..t_h {
            let next = net.step(t, &xs[t], &us[t], &ws[t]);
            xs.push(next);
        }
        let stack = |v: &[DVector<f64>]| DVector::from_iterator(v.iter().map(|x| x.len()).sum(), v.iter().flat_map(|x| x.iter().copied()));
        let x = stack(&xs);
        let u = stack(&us);
        let mut wv = vec![x0];
        wv.extend(ws);
        let w = stack(&wv);
        let rhs = &sd.za * &x + &sd.zb * &u + &w;
        assert!((rhs - &x).amax() <= 1e-10);
        assert_eq!(x.len(), (t_h + 1) * n);
    }
}
