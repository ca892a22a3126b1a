//! Helpers shared by the integration tests: random problem generators and a
//! dense reference solver that shares no code with the library's assembly
//! or conic solvers.
#![allow(dead_code)]

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slscs::problem::{CostModel, CsProblem, NoiseModel, TerminalSpec};
use slscs::sls::{FeedbackGain, ResponsePair};
use slscs::system::{LtvNetwork, StackedDynamics};
use slscs::topology::SystemGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the helpers free of distribution crates
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| gauss(rng));
    let s = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * floor;
    (&s + s.transpose()) * 0.5
}

fn random_diag(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)))
}

/// Random connected undirected graph: a random tree plus a few chords.
pub fn random_graph(rng: &mut ChaCha8Rng, nv: usize) -> SystemGraph {
    let mut pairs = Vec::new();
    for v in 1..nv {
        pairs.push((rng.random_range(0..v), v));
    }
    for _ in 0..rng.random_range(0..=nv) {
        let (a, b) = (rng.random_range(0..nv), rng.random_range(0..nv));
        if a != b {
            pairs.push((a.min(b), a.max(b)));
        }
    }
    SystemGraph::undirected(nv, pairs).unwrap()
}

pub struct RandomOptions {
    pub max_subsystems: usize,
    pub max_horizon: usize,
    /// `mu_0 = 0` and every covariance diagonal, so `Theta` is diagonal.
    pub diagonal_theta: bool,
}

impl Default for RandomOptions {
    fn default() -> Self {
        Self {
            max_subsystems: 4,
            max_horizon: 5,
            diagonal_theta: false,
        }
    }
}

/// Random LTV network on a random graph with diagonal cost.
pub fn random_problem(rng: &mut ChaCha8Rng, opts: &RandomOptions) -> CsProblem {
    let nv = rng.random_range(1..=opts.max_subsystems);
    let horizon = rng.random_range(1..=opts.max_horizon);
    let graph = random_graph(rng, nv);
    let dims: Vec<(usize, usize)> = (0..nv).map(|_| (rng.random_range(1..=2), rng.random_range(1..=2))).collect();
    let xoff: Vec<usize> = dims.iter().scan(0, |s, d| { let o = *s; *s += d.0; Some(o) }).collect();
    let uoff: Vec<usize> = dims.iter().scan(0, |s, d| { let o = *s; *s += d.1; Some(o) }).collect();
    let n: usize = dims.iter().map(|d| d.0).sum();
    let m: usize = dims.iter().map(|d| d.1).sum();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..horizon {
        let mut at = DMatrix::zeros(n, n);
        let mut bt = DMatrix::zeros(n, m);
        for i in 0..nv {
            for j in 0..nv {
                if i == j || graph.has_edge(j, i) {
                    for r in 0..dims[i].0 {
                        for c in 0..dims[j].0 {
                            at[(xoff[i] + r, xoff[j] + c)] = 0.4 * gauss(rng);
                        }
                    }
                }
            }
            for r in 0..dims[i].0 {
                for c in 0..dims[i].1 {
                    bt[(xoff[i] + r, uoff[i] + c)] = gauss(rng);
                }
            }
        }
        a.push(at);
        b.push(bt);
    }
    let net = LtvNetwork::new(dims.clone(), a, b).unwrap();
    let (mu0, sigma0) = if opts.diagonal_theta {
        (DVector::zeros(n), random_diag(rng, n, 0.2, 2.0))
    } else {
        (DVector::from_fn(n, |_, _| gauss(rng)), random_spd(rng, n, 0.1))
    };
    let w: Vec<_> = (0..horizon)
        .map(|_| {
            let blocks: Vec<_> = dims
                .iter()
                .map(|d| if opts.diagonal_theta { random_diag(rng, d.0, 0.05, 0.3) } else { random_spd(rng, d.0, 0.05) * 0.2 })
                .collect();
            slscs::linalg::block_diag(&blocks)
        })
        .collect();
    let noise = NoiseModel::new(mu0, sigma0, w).unwrap();
    let q = (0..horizon).map(|_| random_diag(rng, n, 0.1, 2.0)).collect();
    let r = (0..horizon).map(|_| random_diag(rng, m, 0.1, 1.0)).collect();
    let cost = CostModel::new(q, r).unwrap();
    let terminal = TerminalSpec::new(DVector::zeros(n), random_spd(rng, n, 0.5)).unwrap();
    let d = rng.random_range(0..=2);
    CsProblem::new(net, graph, noise, cost, terminal, d).unwrap()
}

/// Random causal gain with entries of size `scale`.
pub fn random_blt_gain(rng: &mut ChaCha8Rng, sd: &StackedDynamics, scale: f64) -> FeedbackGain {
    let (n, m) = (sd.n, sd.m);
    let k = DMatrix::from_fn(sd.input_len(), sd.state_len(), |r, c| if c / n <= r / m { scale * gauss(rng) } else { 0.0 });
    FeedbackGain { k }
}

/// Stacked disturbance `[x0; w_0; ...; w_{T-1}]` drawn from the noise model.
pub fn sample_disturbance(rng: &mut ChaCha8Rng, cp: &CsProblem) -> DVector<f64> {
    let n = cp.n();
    let mut w = DVector::zeros((cp.horizon() + 1) * n);
    let draw = |rng: &mut ChaCha8Rng, cov: &DMatrix<f64>| -> DVector<f64> {
        let l = cov.clone().cholesky().expect("positive definite").l();
        &l * DVector::from_fn(cov.nrows(), |_, _| gauss(rng))
    };
    let x0 = &cp.noise.mu0 + draw(rng, &cp.noise.sigma0);
    w.rows_mut(0, n).copy_from(&x0);
    for t in 0..cp.horizon() {
        let wt = draw(rng, &cp.noise.w[t]);
        w.rows_mut((t + 1) * n, n).copy_from(&wt);
    }
    w
}

// ---------------------------------------------------------------------------
// Dense reference solver

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub objective: f64,
    pub pair: ResponsePair,
    /// `|| grad (f + phi / t) || / (1 + |f|)` in the reduced coordinates.
    pub stationarity: f64,
    /// `dim(LMI) / t`, the barrier's bound on the objective gap.
    pub barrier_gap: f64,
    pub newton_steps: usize,
}

#[derive(Clone, Copy)]
struct Entry {
    in_x: bool,
    r: usize,
    c: usize,
}

fn owners(dims: &[(usize, usize)], pick: impl Fn(&(usize, usize)) -> usize) -> Vec<usize> {
    dims.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, pick(d))).collect()
}

/// Hop distances from `src` following directed edges.
fn bfs(g: &SystemGraph, src: usize) -> Vec<Option<usize>> {
    let nv = g.num_vertices();
    let mut dist = vec![None; nv];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(v) = queue.pop_front() {
        for &(a, b) in g.edges() {
            if a == v && dist[b].is_none() {
                dist[b] = Some(dist[v].unwrap() + 1);
                queue.push_back(b);
            }
        }
    }
    dist
}

/// Free entries of `(phi_x, phi_u)`: causal, outside the fixed identity
/// diagonal of `phi_x`, and within the hop radius.
fn free_entries(cp: &CsProblem) -> Vec<Entry> {
    let dims = cp.network.dims();
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let xo = owners(dims, |d| d.0);
    let uo = owners(dims, |d| d.1);
    let dist: Vec<_> = (0..cp.num_subsystems()).map(|j| bfs(&cp.graph, j)).collect();
    let within = |j: usize, i: usize, d: usize| dist[j][i].is_some_and(|h| h <= d);
    let cols = (t_h + 1) * n;
    let mut out = Vec::new();
    for c in 0..cols {
        let (tc, j) = (c / n, xo[c % n]);
        for r in 0..cols {
            let (tr, i) = (r / n, xo[r % n]);
            if tr > tc && within(j, i, cp.locality) {
                out.push(Entry { in_x: true, r, c });
            }
        }
        for r in 0..t_h * m {
            let (tr, i) = (r / m, uo[r % m]);
            if tr >= tc && within(j, i, cp.locality + 1) {
                out.push(Entry { in_x: false, r, c });
            }
        }
    }
    out
}

fn pair_from(cp: &CsProblem, entries: &[Entry], z: &DVector<f64>) -> ResponsePair {
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let mut px = DMatrix::identity((t_h + 1) * n, (t_h + 1) * n);
    let mut pu = DMatrix::zeros(t_h * m, (t_h + 1) * n);
    for (e, v) in entries.iter().zip(z.iter()) {
        if e.in_x {
            px[(e.r, e.c)] = *v;
        } else {
            pu[(e.r, e.c)] = *v;
        }
    }
    ResponsePair::new(px, pu, n, m, t_h).unwrap()
}

/// `tr(F Phi Theta Phi^T)` with `F` and `Theta` built here from the raw
/// problem data.
pub fn dense_objective(cp: &CsProblem, p: &ResponsePair) -> f64 {
    let (f, theta) = weights(cp);
    let mut phi = DMatrix::zeros(p.phi_x.nrows() + p.phi_u.nrows(), p.phi_x.ncols());
    phi.rows_mut(0, p.phi_x.nrows()).copy_from(&p.phi_x);
    phi.rows_mut(p.phi_x.nrows(), p.phi_u.nrows()).copy_from(&p.phi_u);
    (&f * &phi * &theta * phi.transpose()).trace()
}

fn weights(cp: &CsProblem) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let sx = (t_h + 1) * n;
    let mut f = DMatrix::zeros(sx + t_h * m, sx + t_h * m);
    for t in 0..t_h {
        f.view_mut((t * n, t * n), (n, n)).copy_from(&cp.cost.q[t]);
        f.view_mut((sx + t * m, sx + t * m), (m, m)).copy_from(&cp.cost.r[t]);
    }
    let mut sigma_w = DMatrix::zeros(sx, sx);
    sigma_w.view_mut((0, 0), (n, n)).copy_from(&cp.noise.sigma0);
    for t in 0..t_h {
        sigma_w.view_mut(((t + 1) * n, (t + 1) * n), (n, n)).copy_from(&cp.noise.w[t]);
    }
    let mut mu_w = DVector::zeros(sx);
    mu_w.rows_mut(0, n).copy_from(&cp.noise.mu0);
    (f, sigma_w + &mu_w * mu_w.transpose())
}

fn sigma_w(cp: &CsProblem) -> DMatrix<f64> {
    let (n, t_h) = (cp.n(), cp.horizon());
    let mut s = DMatrix::zeros((t_h + 1) * n, (t_h + 1) * n);
    s.view_mut((0, 0), (n, n)).copy_from(&cp.noise.sigma0);
    for t in 0..t_h {
        s.view_mut(((t + 1) * n, (t + 1) * n), (n, n)).copy_from(&cp.noise.w[t]);
    }
    s
}

/// Free entries and the affine solution set `z = z0 + N y` of the
/// dynamics and terminal mean equalities.
fn affine_set(cp: &CsProblem) -> (Vec<Entry>, DVector<f64>, DMatrix<f64>) {
    let (n, t_h) = (cp.n(), cp.horizon());
    let sx = (t_h + 1) * n;
    let entries = free_entries(cp);
    let nz = entries.len();

    // equalities A z = b: (I - ZA) phi_x - ZB phi_u = I, then P_T phi_x mu_w = mu_f
    let za = &cp.dynamics.za;
    let zb = &cp.dynamics.zb;
    let ima = DMatrix::identity(sx, sx) - za;
    let rows_param = sx * sx;
    let mut a = DMatrix::zeros(rows_param + n, nz);
    let mut b = DVector::zeros(rows_param + n);
    // identity diagonal blocks of phi_x are fixed; their contribution moves to b
    let fixed_x = DMatrix::<f64>::identity(sx, sx);
    let rhs = DMatrix::<f64>::identity(sx, sx) - &ima * &fixed_x;
    for c in 0..sx {
        for r in 0..sx {
            b[c * sx + r] = rhs[(r, c)];
        }
    }
    for (k, e) in entries.iter().enumerate() {
        for r in 0..sx {
            let v = if e.in_x { ima[(r, e.r)] } else { -zb[(r, e.r)] };
            if v != 0.0 {
                a[(e.c * sx + r, k)] = v;
            }
        }
    }
    let mut mu_w = DVector::zeros(sx);
    mu_w.rows_mut(0, n).copy_from(&cp.noise.mu0);
    for r in 0..n {
        b[rows_param + r] = cp.terminal.mu_f[r] - mu_w[t_h * n + r];
    }
    for (k, e) in entries.iter().enumerate() {
        if e.in_x && e.r / n == t_h {
            a[(rows_param + e.r % n, k)] += mu_w[e.c];
        }
    }

    // affine solution set z = z0 + N y
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let z0 = svd.solve(&b, 1e-12 * smax).unwrap();
    let resid = (&a * &z0 - &b).amax();
    assert!(resid < 1e-9, "oracle equalities are inconsistent ({resid:.3e})");
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let null_idx: Vec<usize> = (0..nz).filter(|&k| eig.eigenvalues[k] <= 1e-10 * lmax.max(1.0)).collect();
    let ny = null_idx.len();
    let basis = DMatrix::from_fn(nz, ny, |r, c| eig.eigenvectors[(r, null_idx[c])]);

    (entries, z0, basis)
}

/// Minimizes the objective over every pair satisfying the dynamics,
/// locality and terminal mean constraints with `Sigma_f - Cov[x_T]`
/// kept positive definite by a log-det barrier. The equalities are removed
/// by projecting onto their affine solution set; each barrier weight is
/// minimized by damped Newton steps.
pub fn dense_oracle(cp: &CsProblem) -> OracleResult {
    let (n, t_h) = (cp.n(), cp.horizon());
    let sx = (t_h + 1) * n;
    let (entries, z0, basis) = affine_set(cp);
    let (nz, ny) = (entries.len(), basis.ncols());

    // quadratic objective in z: 1/2 z' Hz z + gz' z + c
    let (f, theta) = weights(cp);
    let idx = |e: &Entry| if e.in_x { e.r } else { sx + e.r };
    let hz = DMatrix::from_fn(nz, nz, |p, q| 2.0 * f[(idx(&entries[p]), idx(&entries[q]))] * theta[(entries[p].c, entries[q].c)]);
    let mut phi_fixed = DMatrix::zeros(f.nrows(), sx);
    phi_fixed.rows_mut(0, sx).fill_with_identity();
    let g_mat = 2.0 * &f * &phi_fixed * &theta;
    let gz = DVector::from_fn(nz, |p, _| g_mat[(idx(&entries[p]), entries[p].c)]);
    let hy = basis.transpose() * &hz * &basis;
    let gy = basis.transpose() * (&hz * &z0 + &gz);
    let f_of = |y: &DVector<f64>| -> f64 { dense_objective(cp, &pair_from(cp, &entries, &(&z0 + &basis * y))) };

    // last block row of phi_x as an affine function of y: L(y) = L0 + sum_k y_k L_k
    let sw = sigma_w(cp);
    let mut l0 = DMatrix::zeros(n, sx);
    l0.view_mut((0, t_h * n), (n, n)).fill_with_identity();
    let mut lk: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, sx); ny];
    for (p, e) in entries.iter().enumerate() {
        if e.in_x && e.r / n == t_h {
            l0[(e.r % n, e.c)] += z0[p];
            for k in 0..ny {
                lk[k][(e.r % n, e.c)] += basis[(p, k)];
            }
        }
    }
    let active: Vec<usize> = (0..ny).filter(|&k| lk[k].amax() > 0.0).collect();
    let l_of = |y: &DVector<f64>| -> DMatrix<f64> {
        let mut l = l0.clone();
        for &k in &active {
            l += &lk[k] * y[k];
        }
        l
    };
    let slack = |y: &DVector<f64>| -> DMatrix<f64> {
        let l = l_of(y);
        let s = &cp.terminal.sigma_f - &l * &sw * l.transpose();
        (&s + s.transpose()) * 0.5
    };
    let barrier = |y: &DVector<f64>| -> Option<f64> {
        let ch = slack(y).cholesky()?;
        Some(-2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    };
    let barrier_derivs = |y: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let l = l_of(y);
        let sinv = slack(y).try_inverse().unwrap();
        let mks: Vec<DMatrix<f64>> = active.iter().map(|&k| &lk[k] * &sw).collect();
        let gks: Vec<DMatrix<f64>> = mks.iter().map(|mk| mk * l.transpose() + &l * mk.transpose()).collect();
        let sg: Vec<DMatrix<f64>> = gks.iter().map(|gk| &sinv * gk).collect();
        let mut g = DVector::zeros(ny);
        let mut h = DMatrix::zeros(ny, ny);
        for (a_i, &k) in active.iter().enumerate() {
            g[k] = sg[a_i].trace();
            for (b_i, &q) in active.iter().enumerate().skip(a_i) {
                let v = (&sg[a_i] * &sg[b_i]).trace() + 2.0 * (&sinv * &mks[a_i] * lk[q].transpose()).trace();
                h[(k, q)] = v;
                h[(q, k)] = v;
            }
        }
        (g, h)
    };

    // strictly feasible start: minimal terminal covariance trace
    let mut y = {
        let mut hc = DMatrix::zeros(ny, ny);
        let mut gc = DVector::zeros(ny);
        for (a_i, &k) in active.iter().enumerate() {
            let mk = &lk[k] * &sw;
            gc[k] = 2.0 * (&mk * l0.transpose()).trace();
            for &q in &active[a_i..] {
                let v = 2.0 * (&mk * lk[q].transpose()).trace();
                hc[(k, q)] = v;
                hc[(q, k)] = v;
            }
        }
        let reg = 1e-10 * hc.diagonal().amax().max(1.0);
        (hc + DMatrix::identity(ny, ny) * reg).lu().solve(&(-gc)).unwrap()
    };
    assert!(barrier(&y).is_some(), "oracle found no strictly feasible start");

    let dim = n as f64;
    let mut t = 1.0 / f_of(&y).abs().max(1.0);
    let mut steps = 0;
    let mut stationarity = f64::INFINITY;
    loop {
        // centering for weight t: minimize t f + phi
        for _ in 0..200 {
            let (gb, hb) = barrier_derivs(&y);
            let grad = (&hy * &y + &gy) * t + &gb;
            let hess = &hy * t + hb;
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => hess.lu().solve(&(-&grad)).unwrap(),
            };
            let dec = -grad.dot(&step);
            stationarity = grad.norm() / t / (1.0 + f_of(&y).abs());
            if dec / 2.0 < 1e-14 {
                break;
            }
            steps += 1;
            // inside the quadratic region full steps stay feasible; outside it
            // backtrack on the barrier-augmented objective
            let mut alpha = if dec < 0.25 { 1.0 } else { 1.0 / (1.0 + dec.sqrt()) };
            while barrier(&(&y + &step * alpha)).is_none() {
                alpha *= 0.5;
                assert!(alpha > 1e-30, "oracle lost strict feasibility");
            }
            y += &step * alpha;
        }
        let fy = f_of(&y);
        if dim / t <= 1e-9 * fy.abs().max(1.0) {
            break;
        }
        t *= 8.0;
    }
    let z = &z0 + &basis * &y;
    let pair = pair_from(cp, &entries, &z);
    OracleResult {
        objective: dense_objective(cp, &pair),
        pair,
        stationarity,
        barrier_gap: dim / t,
        newton_steps: steps,
    }
}

/// Random directions in the nullspace of the equalities, as pairs whose
/// fixed identity blocks are zero. Adding any of them to a feasible pair
/// keeps the dynamics, locality and terminal mean satisfied.
pub fn feasible_directions(cp: &CsProblem, count: usize, seed: u64) -> Vec<ResponsePair> {
    let (entries, _, basis) = affine_set(cp);
    let (n, t_h) = (cp.n(), cp.horizon());
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let y = DVector::from_fn(basis.ncols(), |_, _| gauss(&mut r));
            let z = &basis * y;
            let z = &z / z.norm();
            let mut p = pair_from(cp, &entries, &z);
            p.phi_x -= DMatrix::identity((t_h + 1) * n, (t_h + 1) * n);
            p
        })
        .collect()
}
