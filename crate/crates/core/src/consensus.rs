//! Consensus ADMM over per-subsystem copies of the system responses.
//!
//! Every subsystem keeps a full copy of `(phi_x, phi_u)` and a dual of the
//! same shape. One iteration reads only the previous snapshot: all primal
//! subproblems are solved (in parallel), then all duals are updated.

use std::collections::BTreeSet;
use std::hash::Hasher;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assemble::{row_weights, selection, structural_value, Layout, LmiScope, QpBuilder};
use crate::conic::{Backend, Session, Settings, SolveReport, Status};
use crate::error::{arg, Error, Result};
use crate::problem::{transform, CsProblem};
use crate::rng;
use crate::sls::{check_parametrization, ResponsePair};
use crate::topology::{Direction, SystemGraph};

/// Scale of the Gaussian entries used to initialize the local copies.
pub const INIT_SCALE: f64 = 0.1;
/// Above this parametrization residual the averaged output is replaced by
/// the copy of subsystem 0.
pub const FALLBACK_RESIDUAL: f64 = 1e-4;

/// How the objective is split across subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Diagonal F when possible, otherwise transformed.
    Auto,
    /// Row-wise terms of the original objective; needs diagonal Q and R.
    DiagonalF,
    /// Column-wise terms in the eigenbasis of Theta.
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmiMode {
    /// The whole terminal covariance inequality in every subproblem.
    Full,
    /// Only the subsystem's own diagonal block; needs block-diagonal Sigma_f.
    LocalSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmOptions {
    pub rho: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub mode: ObjectiveMode,
    pub lmi: LmiMode,
    /// Run even when the graph is not strongly connected.
    pub allow_disconnected: bool,
    /// Keep every message of every iteration in the report.
    pub record_exchange: bool,
    /// Settings of the subproblem solver.
    pub inner: Settings,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            rho: 0.01,
            eps: 1e-4,
            max_iter: 5000,
            seed: 0,
            mode: ObjectiveMode::Auto,
            lmi: LmiMode::Full,
            allow_disconnected: false,
            record_exchange: false,
            inner: inner_settings(),
        }
    }
}

/// Subproblem tolerances used by default.
pub fn inner_settings() -> Settings {
    Settings {
        eps_abs: 1e-8,
        eps_rel: 1e-7,
        max_iter: 10_000,
        backend: Backend::preferred(),
        ..Settings::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub res_x: f64,
    pub res_u: f64,
    /// `(1/N) sum_i || Phi_i^{k+1} - Phi_i^k ||_F^2` over both blocks.
    pub change: f64,
    /// Full objective of every local copy.
    pub objectives: Vec<f64>,
    /// Subsystems whose subproblem solve stopped short of optimality.
    pub flagged: Vec<usize>,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub locals: Vec<ResponsePair>,
    pub duals: Vec<ResponsePair>,
    pub k: usize,
    pub rho: f64,
    pub eps: f64,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub iteration: usize,
    pub sender: usize,
    pub receiver: usize,
    pub digest: u64,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeLog {
    pub messages: Vec<Message>,
}

impl ExchangeLog {
    pub fn total_bytes(&self) -> usize {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    /// `(sender, receiver)` pairs seen in the log.
    pub fn links(&self) -> BTreeSet<(usize, usize)> {
        self.messages.iter().map(|m| (m.sender, m.receiver)).collect()
    }
}

/// What each subsystem received in one exchange round.
pub struct NeighborTable<'a> {
    /// `received[i]` lists `(j, Phi^(j))` for `j` in the d-hop in-neighborhood.
    pub received: Vec<Vec<(usize, &'a ResponsePair)>>,
}

/// Initial local copies: scaled Gaussian entries on the causal localized
/// support, identity diagonal blocks in `phi_x`, zero duals.
pub fn init_state(cp: &CsProblem, rho: f64, eps: f64, seed: u64) -> Result<AdmmState> {
    if !(rho > 0.0 && rho.is_finite()) {
        return arg("penalty must be positive");
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return arg("tolerance must be positive");
    }
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let sx = (t_h + 1) * n;
    let rows = sx + t_h * m;
    let mut rng = rng::stream(seed, rng::STREAM_ADMM_INIT);
    let mut locals = Vec::with_capacity(cp.num_subsystems());
    for _ in 0..cp.num_subsystems() {
        let mut stacked = DMatrix::zeros(rows, sx);
        for r in 0..rows {
            for c in 0..sx {
                stacked[(r, c)] = match structural_value(cp, r, c) {
                    Some(v) => v,
                    None => INIT_SCALE * rng.sample::<f64, _>(StandardNormal),
                };
            }
        }
        locals.push(ResponsePair::from_stacked(&stacked, n, m, t_h)?);
    }
    let duals = vec![ResponsePair::zeros(n, m, t_h); cp.num_subsystems()];
    Ok(AdmmState {
        locals,
        duals,
        k: 0,
        rho,
        eps,
        history: Vec::new(),
    })
}

/// `I_i(d)` for every subsystem, including `i` itself.
pub fn in_neighborhoods(g: &SystemGraph, d: usize) -> Vec<Vec<usize>> {
    (0..g.num_vertices())
        .map(|i| g.d_neighbors(i, d, Direction::In).expect("vertex in range").into_iter().collect())
        .collect()
}

fn digest(p: &ResponsePair) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in p.phi_x.iter().chain(p.phi_u.iter()) {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

fn payload_bytes(p: &ResponsePair) -> usize {
    (p.phi_x.len() + p.phi_u.len()) * std::mem::size_of::<f64>()
}

/// Delivers every copy to the d-hop out-neighbors of its owner.
pub fn exchange<'a>(state: &'a AdmmState, g: &SystemGraph, d: usize) -> Result<(NeighborTable<'a>, ExchangeLog)> {
    if g.num_vertices() != state.locals.len() {
        return Err(Error::Dimension("graph and state disagree on the number of subsystems".into()));
    }
    let digests: Vec<u64> = state.locals.iter().map(digest).collect();
    let mut log = ExchangeLog::default();
    let mut received = Vec::with_capacity(state.locals.len());
    for (i, nbrs) in in_neighborhoods(g, d).into_iter().enumerate() {
        let mut row = Vec::with_capacity(nbrs.len());
        for j in nbrs {
            log.messages.push(Message {
                iteration: state.k,
                sender: j,
                receiver: i,
                digest: digests[j],
                bytes: payload_bytes(&state.locals[j]),
            });
            row.push((j, &state.locals[j]));
        }
        received.push(row);
    }
    Ok((NeighborTable { received }, log))
}

/// `(1/N) sum_i sum_{j in I_i(d)} || Phi_i - Phi_j ||_F^2` for each block.
pub fn consensus_residual(state: &AdmmState, g: &SystemGraph, d: usize) -> (f64, f64) {
    let nbrs = in_neighborhoods(g, d);
    residual_with(&state.locals, &nbrs)
}

fn residual_with(locals: &[ResponsePair], nbrs: &[Vec<usize>]) -> (f64, f64) {
    let (mut rx, mut ru) = (0.0, 0.0);
    for (i, list) in nbrs.iter().enumerate() {
        for &j in list {
            if j != i {
                rx += (&locals[i].phi_x - &locals[j].phi_x).norm_squared();
                ru += (&locals[i].phi_u - &locals[j].phi_u).norm_squared();
            }
        }
    }
    let n = locals.len() as f64;
    (rx / n, ru / n)
}

/// `Omega_i + rho sum_{j in I_i(d)} (Phi_i - Phi_j)` for both blocks.
pub fn dual_update(i: usize, state: &AdmmState, neighbors: &[usize]) -> ResponsePair {
    let mut out = state.duals[i].clone();
    let own = &state.locals[i];
    for &j in neighbors {
        if j == i {
            continue;
        }
        let other = &state.locals[j];
        out.phi_x += (&own.phi_x - &other.phi_x) * state.rho;
        out.phi_u += (&own.phi_u - &other.phi_u) * state.rho;
    }
    out
}

/// Cached subproblem of one subsystem. The quadratic part and the
/// constraints never change between iterations, so only the linear term is
/// refreshed and the solver continues from its previous iterate.
pub struct Subproblem {
    pub index: usize,
    pub neighbors: Vec<usize>,
    ws: Session,
    q_base: Vec<f64>,
}

/// Objective split and layout shared by all subproblems of a run.
pub struct Decomposition {
    pub mode: ObjectiveMode,
    pub lmi: LmiMode,
    pub layout: Layout,
    col_weights: DMatrix<f64>,
}

impl Decomposition {
    pub fn new(cp: &CsProblem, mode: ObjectiveMode, lmi: LmiMode) -> Result<Self> {
        let diagonal_f = cp.cost.is_diagonal();
        let mode = match mode {
            ObjectiveMode::Auto if diagonal_f => ObjectiveMode::DiagonalF,
            ObjectiveMode::Auto => ObjectiveMode::Transformed,
            ObjectiveMode::DiagonalF if !diagonal_f => {
                return Err(Error::Unsupported(
                    "row-wise splitting needs diagonal Q and R; use the transformed mode".into(),
                ))
            }
            other => other,
        };
        if lmi == LmiMode::LocalSigma {
            let owner = crate::topology::state_owner(cp.network.dims());
            let sf = &cp.terminal.sigma_f;
            let n = cp.n();
            if (0..n).any(|a| (0..n).any(|b| owner[a] != owner[b] && sf[(a, b)] != 0.0)) {
                return arg("local-sigma mode needs a terminal covariance that is block diagonal over subsystems");
            }
        }
        let (layout, col_weights) = match mode {
            ObjectiveMode::Transformed => {
                let tp = transform(cp);
                let w = DMatrix::from_diagonal(&tp.lambda);
                (Layout::transformed(cp, &tp), w)
            }
            _ => (Layout::direct(cp), cp.theta()),
        };
        Ok(Self {
            mode,
            lmi,
            layout,
            col_weights,
        })
    }

    /// Builds the constant part of subsystem `i`'s program.
    pub fn subproblem(&self, cp: &CsProblem, i: usize, neighbors: Vec<usize>, rho: f64, settings: &Settings) -> Result<Subproblem> {
        let lay = &self.layout;
        let parts = &cp.partitions;
        let mut b = QpBuilder::new(lay);
        let f = row_weights(cp);
        match self.mode {
            ObjectiveMode::Transformed => {
                let cols = selection(lay.cols, &parts.col_blocks[i]);
                b.add_quadratic(&f, &self.col_weights, None, Some(&cols));
            }
            _ => {
                let sx = lay.state_rows();
                let mut rows = parts.row_blocks_x[i].clone();
                rows.extend(parts.row_blocks_u[i].iter().map(|r| sx + r));
                let rows = selection(lay.rows, &rows);
                b.add_quadratic(&f, &self.col_weights, Some(&rows), None);
            }
        }
        b.add_proximal(rho * neighbors.len() as f64, &DMatrix::zeros(lay.rows, lay.cols));
        b.add_parametrization(cp, &parts.col_blocks[i]);
        b.add_pending_structure();
        b.add_terminal_mean(cp, &parts.terminal_blocks[i]);
        let scope = match self.lmi {
            LmiMode::Full => LmiScope::Full,
            LmiMode::LocalSigma => LmiScope::Rows(parts.terminal_blocks[i].clone()),
        };
        b.add_lmi(cp, &scope);
        let qp = b.build();
        let q_base = qp.q.clone();
        let ws = Session::new(&qp, settings)?;
        Ok(Subproblem {
            index: i,
            neighbors,
            ws,
            q_base,
        })
    }
}

impl Subproblem {
    /// Minimizes `f_i + <Omega_i, Phi> + rho sum_j || Phi - (Phi_i + Phi_j)/2 ||^2`
    /// over the local feasible set, starting from the previous solve.
    pub fn update(
        &mut self,
        layout: &Layout,
        rho: f64,
        own: &ResponsePair,
        received: &[(usize, &ResponsePair)],
        dual: &ResponsePair,
    ) -> Result<(ResponsePair, SolveReport)> {
        let k = received.len() as f64;
        // sum_j (Phi_i + Phi_j) / 2 = (k Phi_i + sum_j Phi_j) / 2
        let mut target = own.stacked() * (0.5 * k);
        for (_, p) in received {
            target += p.stacked() * 0.5;
        }
        // <Omega, Phi> - 2 rho sum_j <target_j, Phi>
        let lin = dual.stacked() - target * (2.0 * rho);
        let coeffs = layout.linear_coefficients(&lin);
        let q: Vec<f64> = self.q_base.iter().zip(&coeffs).map(|(a, b)| a + b).collect();
        self.ws.update_q(&q)?;
        let (z, report) = self.ws.solve();
        Ok((layout.pair_from_z(&z), report))
    }

    /// Starts the next solve from `p`.
    pub fn warm_start(&mut self, layout: &Layout, p: &ResponsePair) -> Result<()> {
        self.ws.warm_start(&layout.z_from_pair(p))
    }
}

/// One subproblem solve for subsystem `i`, reading the iteration-k snapshot.
pub fn primal_update(
    i: usize,
    state: &AdmmState,
    table: &NeighborTable<'_>,
    dec: &Decomposition,
    sub: &mut Subproblem,
) -> Result<(ResponsePair, SolveReport)> {
    sub.update(&dec.layout, state.rho, &state.locals[i], &table.received[i], &state.duals[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmmStatus {
    Converged,
    MaxIter,
}

impl std::fmt::Display for AdmmStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdmmStatus::Converged => "converged",
            AdmmStatus::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmReport {
    pub status: AdmmStatus,
    pub iterations: usize,
    pub rho: f64,
    pub eps: f64,
    pub mode: ObjectiveMode,
    pub lmi: LmiMode,
    pub history: Vec<IterationRecord>,
    /// Objective of the returned pair.
    pub objective: f64,
    pub parametrization_residual: f64,
    pub max_pairwise_deviation: f64,
    /// The average violated the parametrization and subsystem 0's copy was
    /// returned instead.
    pub used_fallback: bool,
    pub flagged_solves: usize,
    pub bytes_exchanged: usize,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exchange: Vec<Message>,
}

/// Iteration driver holding the state and the cached subproblems.
pub struct AdmmRun<'a> {
    pub cp: &'a CsProblem,
    pub state: AdmmState,
    pub dec: Decomposition,
    pub subs: Vec<Subproblem>,
    pub log: ExchangeLog,
    record_exchange: bool,
    bytes: usize,
    flagged: usize,
}

impl<'a> AdmmRun<'a> {
    pub fn new(cp: &'a CsProblem, opts: &AdmmOptions) -> Result<Self> {
        if !cp.graph.is_strongly_connected() && !opts.allow_disconnected {
            return arg("the system graph is not strongly connected, so the copies cannot reach consensus");
        }
        let state = init_state(cp, opts.rho, opts.eps, opts.seed)?;
        let dec = Decomposition::new(cp, opts.mode, opts.lmi)?;
        let nbrs = in_neighborhoods(&cp.graph, cp.locality);
        let subs = nbrs
            .into_par_iter()
            .enumerate()
            .map(|(i, list)| {
                let mut sub = dec.subproblem(cp, i, list, opts.rho, &opts.inner)?;
                sub.warm_start(&dec.layout, &state.locals[i])?;
                Ok(sub)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cp,
            state,
            dec,
            subs,
            log: ExchangeLog::default(),
            record_exchange: opts.record_exchange,
            bytes: 0,
            flagged: 0,
        })
    }

    /// One barrier-synchronized iteration; returns its record.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let (table, log) = exchange(&self.state, &self.cp.graph, self.cp.locality)?;
        self.bytes += log.total_bytes();
        if self.record_exchange {
            self.log.messages.extend(log.messages);
        }
        let state = &self.state;
        let dec = &self.dec;
        let results: Vec<(ResponsePair, SolveReport)> = self
            .subs
            .par_iter_mut()
            .map(|sub| primal_update(sub.index, state, &table, dec, sub))
            .collect::<Result<_>>()?;
        drop(table);
        let n = results.len() as f64;
        let mut change = 0.0;
        let mut flagged = Vec::new();
        let mut inner_iterations = 0;
        let mut locals = Vec::with_capacity(results.len());
        for (i, (p, rep)) in results.into_iter().enumerate() {
            change += (&p.phi_x - &self.state.locals[i].phi_x).norm_squared();
            change += (&p.phi_u - &self.state.locals[i].phi_u).norm_squared();
            if rep.status != Status::Optimal {
                flagged.push(i);
            }
            inner_iterations += rep.iterations;
            locals.push(p);
        }
        self.flagged += flagged.len();
        self.state.locals = locals;
        let duals: Vec<ResponsePair> =
            (0..self.subs.len()).into_par_iter().map(|i| dual_update(i, &self.state, &self.subs[i].neighbors)).collect();
        self.state.duals = duals;
        self.state.k += 1;
        let nbrs: Vec<Vec<usize>> = self.subs.iter().map(|s| s.neighbors.clone()).collect();
        let (res_x, res_u) = residual_with(&self.state.locals, &nbrs);
        let objectives = self.state.locals.par_iter().map(|p| self.cp.objective(p)).collect();
        self.state.history.push(IterationRecord {
            iteration: self.state.k,
            res_x,
            res_u,
            change: change / n,
            objectives,
            flagged,
            inner_iterations,
        });
        Ok(self.state.history.last().expect("record just pushed"))
    }

    pub fn converged(&self) -> bool {
        self.state.history.last().is_some_and(|r| {
            r.res_x <= self.state.eps && r.res_u <= self.state.eps && r.change <= self.state.eps
        })
    }

    /// Average of the copies, or subsystem 0's copy when the average is not
    /// a valid response.
    pub fn output(&self) -> Result<(ResponsePair, f64, bool)> {
        let locals = &self.state.locals;
        let mut avg = locals[0].clone();
        for p in &locals[1..] {
            avg.phi_x += &p.phi_x;
            avg.phi_u += &p.phi_u;
        }
        let inv = 1.0 / locals.len() as f64;
        avg.phi_x *= inv;
        avg.phi_u *= inv;
        let res = check_parametrization(&self.cp.dynamics, &avg)?;
        if res > FALLBACK_RESIDUAL {
            let first = locals[0].clone();
            let res0 = check_parametrization(&self.cp.dynamics, &first)?;
            return Ok((first, res0, true));
        }
        Ok((avg, res, false))
    }

    pub fn max_pairwise_deviation(&self) -> f64 {
        let l = &self.state.locals;
        let mut worst = 0.0f64;
        for i in 0..l.len() {
            for j in (i + 1)..l.len() {
                let d = ((&l[i].phi_x - &l[j].phi_x).norm_squared() + (&l[i].phi_u - &l[j].phi_u).norm_squared()).sqrt();
                worst = worst.max(d);
            }
        }
        worst
    }

    fn report(&self, status: AdmmStatus, objective: f64, res: f64, fallback: bool, wall: f64) -> AdmmReport {
        AdmmReport {
            status,
            iterations: self.state.k,
            rho: self.state.rho,
            eps: self.state.eps,
            mode: self.dec.mode,
            lmi: self.dec.lmi,
            history: self.state.history.clone(),
            objective,
            parametrization_residual: res,
            max_pairwise_deviation: self.max_pairwise_deviation(),
            used_fallback: fallback,
            flagged_solves: self.flagged,
            bytes_exchanged: self.bytes,
            wall_time_s: wall,
            exchange: self.log.messages.clone(),
        }
    }
}

/// Runs the consensus iterations until the residuals and the iterate change
/// fall below `eps`, or `max_iter` is reached.
pub fn run(cp: &CsProblem, opts: &AdmmOptions) -> Result<(ResponsePair, AdmmReport)> {
    let start = Instant::now();
    let mut admm = AdmmRun::new(cp, opts)?;
    let mut status = AdmmStatus::MaxIter;
    while admm.state.k < opts.max_iter {
        admm.step()?;
        if admm.converged() {
            status = AdmmStatus::Converged;
            break;
        }
    }
    let (pair, res, fallback) = admm.output()?;
    let objective = cp.objective(&pair);
    let report = admm.report(status, objective, res, fallback, start.elapsed().as_secs_f64());
    Ok((pair, report))
}
