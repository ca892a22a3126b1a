//! Covariance-steering problem data, moment formulas, objective and its
//! separable decompositions, the terminal LMI, and the eigenbasis
//! transformation that makes the objective column-separable.

use nalgebra::{DMatrix, DVector};

use crate::error::{arg, Error, Result};
use crate::linalg::{self, block_diag, psd_sqrt, sorted_eigen};
use crate::sls::ResponsePair;
use crate::system::{stack_dynamics, LtvNetwork, StackedDynamics};
use crate::topology::{build_partitions, locality_mask, LocalityMask, Partitions, SystemGraph};

/// Initial-state and process-noise statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    /// `W_t = Cov[w_t]`, one per step.
    pub w: Vec<DMatrix<f64>>,
}

impl NoiseModel {
    pub fn new(mu0: DVector<f64>, sigma0: DMatrix<f64>, w: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = mu0.len();
        if sigma0.shape() != (n, n) || w.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::Dimension("noise covariances must be n x n".into()));
        }
        for (name, m) in std::iter::once(("Sigma0", &sigma0)).chain(w.iter().map(|m| ("W_t", m))) {
            if linalg::asymmetry(m) > 1e-9 {
                return arg(format!("{name} is not symmetric"));
            }
            if linalg::min_eigenvalue(m) < -1e-10 {
                return arg(format!("{name} is not positive semidefinite"));
            }
        }
        Ok(Self { mu0, sigma0, w })
    }

    pub fn horizon(&self) -> usize {
        self.w.len()
    }

    /// `[mu0; 0; ...; 0]`.
    pub fn mu_w(&self) -> DVector<f64> {
        let n = self.mu0.len();
        let mut v = DVector::zeros((self.horizon() + 1) * n);
        v.rows_mut(0, n).copy_from(&self.mu0);
        v
    }

    /// `blkdiag(Sigma0, W_0, ..., W_{T-1})`.
    pub fn sigma_w(&self) -> DMatrix<f64> {
        let mut blocks = vec![self.sigma0.clone()];
        blocks.extend(self.w.iter().cloned());
        block_diag(&blocks)
    }

    /// `Sigma_w + mu_w mu_w^T`.
    pub fn theta(&self) -> DMatrix<f64> {
        let mu = self.mu_w();
        self.sigma_w() + &mu * mu.transpose()
    }
}

/// Stage costs `Q_t` (n x n) and `R_t` (m x m) for `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
}

impl CostModel {
    pub fn new(q: Vec<DMatrix<f64>>, r: Vec<DMatrix<f64>>) -> Result<Self> {
        if q.len() != r.len() || q.is_empty() {
            return arg("need one Q_t and one R_t per step");
        }
        for m in &q {
            if linalg::asymmetry(m) > 1e-9 || linalg::min_eigenvalue(m) < -1e-10 {
                return arg("Q_t must be symmetric positive semidefinite");
            }
        }
        for m in &r {
            if linalg::asymmetry(m) > 1e-9 || linalg::min_eigenvalue(m) <= 0.0 {
                return arg("R_t must be symmetric positive definite");
            }
        }
        Ok(Self { q, r })
    }

    pub fn time_invariant(q: DMatrix<f64>, r: DMatrix<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![q; horizon], vec![r; horizon])
    }

    /// `blkdiag(Q_0, ..., Q_{T-1}, 0)`.
    pub fn stacked_q(&self) -> DMatrix<f64> {
        let n = self.q[0].nrows();
        let mut blocks = self.q.clone();
        blocks.push(DMatrix::zeros(n, n));
        block_diag(&blocks)
    }

    pub fn stacked_r(&self) -> DMatrix<f64> {
        block_diag(&self.r)
    }

    /// `F = blkdiag(Q, R)`.
    pub fn f(&self) -> DMatrix<f64> {
        block_diag(&[self.stacked_q(), self.stacked_r()])
    }

    pub fn is_diagonal(&self) -> bool {
        self.q.iter().chain(&self.r).all(is_diagonal)
    }
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSpec {
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
}

impl TerminalSpec {
    pub fn new(mu_f: DVector<f64>, sigma_f: DMatrix<f64>) -> Result<Self> {
        let n = mu_f.len();
        if sigma_f.shape() != (n, n) {
            return Err(Error::Dimension("Sigma_f must be n x n".into()));
        }
        if linalg::asymmetry(&sigma_f) > 1e-9 {
            return arg("Sigma_f is not symmetric");
        }
        if linalg::min_eigenvalue(&sigma_f) <= 0.0 {
            return arg("Sigma_f must be positive definite");
        }
        Ok(Self { mu_f, sigma_f })
    }
}

/// `n x (T+1)n` picker of time block `t`.
pub fn selector(t: usize, n: usize, horizon: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, (horizon + 1) * n);
    for i in 0..n {
        p[(i, t * n + i)] = 1.0;
    }
    p
}

/// The localized SLS covariance-steering problem.
#[derive(Debug, Clone)]
pub struct CsProblem {
    pub network: LtvNetwork,
    pub graph: SystemGraph,
    pub dynamics: StackedDynamics,
    pub noise: NoiseModel,
    pub cost: CostModel,
    pub terminal: TerminalSpec,
    pub locality: usize,
    pub mask: LocalityMask,
    pub partitions: Partitions,
}

impl CsProblem {
    pub fn new(
        network: LtvNetwork,
        graph: SystemGraph,
        noise: NoiseModel,
        cost: CostModel,
        terminal: TerminalSpec,
        locality: usize,
    ) -> Result<Self> {
        let (n, m, t_h) = (network.n(), network.m(), network.horizon());
        if noise.mu0.len() != n || noise.horizon() != t_h {
            return Err(Error::Dimension("noise model does not match network".into()));
        }
        if cost.q.len() != t_h
            || cost.q.iter().any(|q| q.shape() != (n, n))
            || cost.r.iter().any(|r| r.shape() != (m, m))
        {
            return Err(Error::Dimension("cost model does not match network".into()));
        }
        if terminal.mu_f.len() != n {
            return Err(Error::Dimension("terminal spec does not match network".into()));
        }
        if !network.is_consistent_with(&graph) {
            return arg("dynamics couple subsystems that are not adjacent in the system graph");
        }
        let dynamics = stack_dynamics(&network);
        let mask = locality_mask(&graph, locality, network.dims(), t_h);
        let partitions = build_partitions(network.dims(), t_h)?;
        Ok(Self {
            network,
            graph,
            dynamics,
            noise,
            cost,
            terminal,
            locality,
            mask,
            partitions,
        })
    }

    /// Same data with a different locality radius.
    pub fn with_locality(&self, d: usize) -> Result<Self> {
        Self::new(
            self.network.clone(),
            self.graph.clone(),
            self.noise.clone(),
            self.cost.clone(),
            self.terminal.clone(),
            d,
        )
    }

    pub fn n(&self) -> usize {
        self.dynamics.n
    }

    pub fn m(&self) -> usize {
        self.dynamics.m
    }

    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }

    pub fn num_subsystems(&self) -> usize {
        self.network.num_subsystems()
    }

    pub fn theta(&self) -> DMatrix<f64> {
        self.noise.theta()
    }

    /// Objective evaluated block by block, using that `F` and `Theta` are
    /// block diagonal over time.
    pub fn objective(&self, p: &ResponsePair) -> f64 {
        let (n, m, t_h) = (self.n(), self.m(), self.horizon());
        let mut theta = Vec::with_capacity(t_h + 1);
        theta.push(&self.noise.sigma0 + &self.noise.mu0 * self.noise.mu0.transpose());
        theta.extend(self.noise.w.iter().cloned());
        let term = |blk: nalgebra::DMatrixView<f64>, wr: &DMatrix<f64>, th: &DMatrix<f64>| -> f64 {
            if blk.iter().all(|v| *v == 0.0) {
                return 0.0;
            }
            (wr * blk * th).component_mul(&blk).sum()
        };
        let mut total = 0.0;
        for t in 0..t_h {
            for (tp, th) in theta.iter().enumerate() {
                total += term(p.phi_x.view((t * n, tp * n), (n, n)), &self.cost.q[t], th);
                total += term(p.phi_u.view((t * m, tp * n), (m, n)), &self.cost.r[t], th);
            }
        }
        total
    }
}

/// `E[x] = phi_x mu_w`, `Cov[x] = phi_x Sigma_w phi_x^T`.
pub fn moments_of_x(p: &ResponsePair, nm: &NoiseModel) -> (DVector<f64>, DMatrix<f64>) {
    let mean = &p.phi_x * nm.mu_w();
    let cov = linalg::symmetrize(&(&p.phi_x * nm.sigma_w() * p.phi_x.transpose()));
    (mean, cov)
}

/// `|| F^{1/2} [phi_x; phi_u] Theta^{1/2} ||_F^2`.
pub fn objective_f(p: &ResponsePair, cm: &CostModel, nm: &NoiseModel) -> f64 {
    let f_half = psd_sqrt(&cm.f());
    let theta_half = psd_sqrt(&nm.theta());
    (f_half * p.stacked() * theta_half).norm_squared()
}

/// Per-subsystem row-wise terms; requires diagonal `F`.
pub fn f_row_terms(p: &ResponsePair, cm: &CostModel, nm: &NoiseModel, parts: &Partitions) -> Result<Vec<f64>> {
    if !cm.is_diagonal() {
        return Err(Error::Unsupported(
            "row-wise decomposition needs diagonal Q and R; use the transformed problem".into(),
        ));
    }
    let theta = nm.theta();
    let q = cm.stacked_q();
    let r = cm.stacked_r();
    let quad = |row: nalgebra::DMatrixView<f64>| (row * &theta * row.transpose())[(0, 0)];
    Ok(parts
        .row_blocks_x
        .iter()
        .zip(&parts.row_blocks_u)
        .map(|(rx, ru)| {
            let sx: f64 = rx.iter().map(|&r_| q[(r_, r_)] * quad(p.phi_x.rows(r_, 1))).sum();
            let su: f64 = ru.iter().map(|&s| r[(s, s)] * quad(p.phi_u.rows(s, 1))).sum();
            sx + su
        })
        .collect())
}

/// Per-subsystem column-wise terms; requires diagonal `Theta`.
pub fn f_col_terms(p: &ResponsePair, cm: &CostModel, nm: &NoiseModel, parts: &Partitions) -> Result<Vec<f64>> {
    let theta = nm.theta();
    if !is_diagonal(&theta) {
        return Err(Error::Unsupported(
            "column-wise decomposition needs diagonal Theta; use the transformed problem".into(),
        ));
    }
    Ok(column_terms(&p.phi_x, &p.phi_u, &cm.stacked_q(), &cm.stacked_r(), &theta.diagonal(), parts))
}

pub(crate) fn column_terms(
    px: &DMatrix<f64>,
    pu: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    weights: &DVector<f64>,
    parts: &Partitions,
) -> Vec<f64> {
    parts
        .col_blocks
        .iter()
        .map(|cols| {
            cols.iter()
                .map(|&c| {
                    let cx = px.column(c);
                    let cu = pu.column(c);
                    weights[c] * ((cx.transpose() * q * cx)[(0, 0)] + (cu.transpose() * r * cu)[(0, 0)])
                })
                .sum()
        })
        .collect()
}

/// `[[Sigma_f, P_T phi_x Sigma_w^{1/2}], [(.)^T, I]]`.
pub fn lmi_block(p: &ResponsePair, nm: &NoiseModel, ts: &TerminalSpec) -> DMatrix<f64> {
    let n = p.n();
    let size = p.phi_x.ncols();
    let g = p.phi_x.rows(p.horizon() * n, n) * psd_sqrt(&nm.sigma_w());
    let mut out = DMatrix::zeros(n + size, n + size);
    out.view_mut((0, 0), (n, n)).copy_from(&ts.sigma_f);
    out.view_mut((0, n), (n, size)).copy_from(&g);
    out.view_mut((n, 0), (size, n)).copy_from(&g.transpose());
    out.view_mut((n, n), (size, size)).fill_with_identity();
    out
}

/// `Cov[x_T] = P_T phi_x Sigma_w phi_x^T P_T^T`.
pub fn terminal_covariance(p: &ResponsePair, nm: &NoiseModel) -> DMatrix<f64> {
    let n = p.n();
    let last = p.phi_x.rows(p.horizon() * n, n);
    linalg::symmetrize(&(last * nm.sigma_w() * last.transpose()))
}

/// `|| P_T phi_x P_0^T mu0 - mu_f ||_2`.
pub fn terminal_mean_residual(p: &ResponsePair, nm: &NoiseModel, ts: &TerminalSpec) -> f64 {
    let rows: Vec<usize> = (0..p.n()).collect();
    terminal_mean_residual_rows(p, nm, ts, &rows)
}

/// Terminal mean residual restricted to the state coordinates `rows`.
pub fn terminal_mean_residual_rows(p: &ResponsePair, nm: &NoiseModel, ts: &TerminalSpec, rows: &[usize]) -> f64 {
    let block = p.phi_x_block(p.horizon(), 0);
    rows.iter()
        .map(|&r| {
            let v = (block.row(r) * &nm.mu0)[(0, 0)] - ts.mu_f[r];
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `Theta = V Lambda V^T` with `V` orthogonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedProblem {
    pub v: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

impl TransformedProblem {
    pub fn reconstruction_error(&self, theta: &DMatrix<f64>) -> f64 {
        (&self.v * DMatrix::from_diagonal(&self.lambda) * self.v.transpose() - theta).norm()
    }
}

/// Eigen-decomposes `Theta` one connected block at a time so that the
/// eigenvectors stay inside the coordinates they mix. Singleton blocks keep
/// their unit vector; larger blocks are sorted by descending eigenvalue
/// with sign-fixed eigenvectors.
pub fn transform(cp: &CsProblem) -> TransformedProblem {
    transform_theta(&cp.theta())
}

pub fn transform_theta(theta: &DMatrix<f64>) -> TransformedProblem {
    let size = theta.nrows();
    let mut v = DMatrix::zeros(size, size);
    let mut lambda = DVector::zeros(size);
    for comp in components(theta) {
        if comp.len() == 1 {
            let c = comp[0];
            v[(c, c)] = 1.0;
            lambda[c] = theta[(c, c)];
            continue;
        }
        let sub = DMatrix::from_fn(comp.len(), comp.len(), |a, b| theta[(comp[a], comp[b])]);
        let (vals, vecs) = sorted_eigen(&sub);
        for (k, &ck) in comp.iter().enumerate() {
            lambda[ck] = vals[k].max(0.0);
            for (a, &ca) in comp.iter().enumerate() {
                v[(ca, ck)] = vecs[(a, k)];
            }
        }
    }
    TransformedProblem { v, lambda }
}

/// Connected components of the nonzero pattern, each sorted ascending,
/// ordered by their smallest index.
fn components(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let size = m.nrows();
    let mut label = vec![usize::MAX; size];
    let mut out = Vec::new();
    for s in 0..size {
        if label[s] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![s];
        label[s] = id;
        let mut comp = Vec::new();
        while let Some(v) = stack.pop() {
            comp.push(v);
            for w in 0..size {
                if label[w] == usize::MAX && (m[(v, w)] != 0.0 || m[(w, v)] != 0.0) {
                    label[w] = id;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// `Phi = Psi V^T`.
pub fn detransform(psi_x: &DMatrix<f64>, psi_u: &DMatrix<f64>, v: &DMatrix<f64>, n: usize, m: usize, horizon: usize) -> Result<ResponsePair> {
    let size = v.nrows();
    if (v.transpose() * v - DMatrix::<f64>::identity(size, size)).amax() > 1e-8 {
        return arg("V is not orthogonal");
    }
    ResponsePair::new(psi_x * v.transpose(), psi_u * v.transpose(), n, m, horizon)
}
