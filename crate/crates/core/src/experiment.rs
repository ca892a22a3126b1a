//! Swing-grid experiment instances: random spanning-tree topology, sampled
//! generator parameters, initial distribution and terminal targets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{RunConfig, TerminalConfig};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::problem::{CostModel, CsProblem, NoiseModel, TerminalSpec};
use crate::rng;
use crate::system::{swing_grid, SwingParams};

/// Identity added when the sampled terminal covariance is numerically
/// singular.
pub const SIGMA_F_GUARD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: CsProblem,
    pub swing: Option<SwingParams>,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    /// Identity added to `Sigma_f` on top of the configured shift because
    /// the sample was nearly singular (zero otherwise).
    pub sigma_f_guard: f64,
}

/// `M M^T + shift I`, plus [`SIGMA_F_GUARD`] `I` when the smallest
/// eigenvalue would otherwise fall below the guard. Returns the matrix and
/// the guard actually added.
pub fn sample_sigma_f(n: usize, tc: &TerminalConfig, seed: u64) -> Result<(DMatrix<f64>, f64)> {
    let mut rng = rng::stream(seed, rng::STREAM_TERMINAL);
    let diag = Normal::new(tc.diag_mean, tc.diag_var.sqrt()).map_err(|e| Error::Argument(e.to_string()))?;
    let off = Normal::new(0.0, tc.offdiag_var.sqrt()).map_err(|e| Error::Argument(e.to_string()))?;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] = if r == c { diag.sample(&mut rng) } else { off.sample(&mut rng) };
        }
    }
    let mut sf = symmetrize(&(&m * m.transpose())) + DMatrix::identity(n, n) * tc.shift;
    let mut guard = 0.0;
    if min_eigenvalue(&sf) < SIGMA_F_GUARD {
        guard = SIGMA_F_GUARD;
        sf += DMatrix::identity(n, n) * guard;
    }
    Ok((sf, guard))
}

/// Builds the configured swing-grid instance. Equal configurations give
/// identical instances.
pub fn generate(cfg: &RunConfig) -> Result<Instance> {
    cfg.validate()?;
    let ic = &cfg.instance;
    let seed = cfg.seed;
    let (net, graph, swing) = swing_grid(ic.rows, ic.cols, ic.horizon, seed, ic.dt, &ic.swing)?;
    let n = net.n();
    let m = net.m();

    let mut rng = rng::stream(seed, rng::STREAM_NOISE);
    let mu0 = DVector::from_fn(n, |_, _| cfg.noise.mu0_scale * rng.sample::<f64, _>(StandardNormal));
    // uniform on (0, max]
    let s0 = DVector::from_fn(n, |_, _| cfg.noise.sigma0_max * (1.0 - rng.random::<f64>()));
    let sigma0 = DMatrix::from_diagonal(&s0);
    let w = vec![DMatrix::identity(n, n) * cfg.noise.w_scale; ic.horizon];
    let noise = NoiseModel::new(mu0, sigma0, w)?;

    let pattern = &cfg.cost.q_pattern;
    let mut qd = Vec::with_capacity(n);
    for &(ni, _) in net.dims() {
        qd.extend((0..ni).map(|a| pattern[a % pattern.len()]));
    }
    let q = DMatrix::from_diagonal(&DVector::from_vec(qd));
    let r = DMatrix::identity(m, m) * cfg.cost.r_scale;
    let cost = CostModel::time_invariant(q, r, ic.horizon)?;

    let (sigma_f, guard) = sample_sigma_f(n, &cfg.terminal, seed)?;
    let terminal = TerminalSpec::new(DVector::from_element(n, cfg.terminal.mu_f), sigma_f)?;
    let problem = CsProblem::new(net, graph, noise, cost, terminal, ic.locality)?;
    Ok(Instance {
        problem,
        swing: Some(swing),
        rows: ic.rows,
        cols: ic.cols,
        seed,
        sigma_f_guard: guard,
    })
}

/// The reference configuration shrunk to a `rows x cols` grid and horizon.
pub fn reduced_config(rows: usize, cols: usize, horizon: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.instance.rows = rows;
    cfg.instance.cols = cols;
    cfg.instance.horizon = horizon;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_tree_edges() {
        let inst = generate(&RunConfig::default()).unwrap();
        assert_eq!(inst.problem.num_subsystems(), 36);
        assert_eq!(inst.problem.graph.undirected_pairs().len(), 35);
    }

    #[test]
    fn single_cell_has_no_edges() {
        let inst = generate(&reduced_config(1, 1, 3, 4)).unwrap();
        assert_eq!(inst.problem.num_subsystems(), 1);
        assert!(inst.problem.graph.edges().is_empty());
    }

    #[test]
    fn unshifted_sample_gets_guard_only_when_needed() {
        let tc = TerminalConfig {
            diag_mean: 0.0,
            diag_var: 0.0,
            offdiag_var: 0.0,
            shift: 0.0,
            mu_f: 0.0,
        };
        let (sf, guard) = sample_sigma_f(3, &tc, 1).unwrap();
        assert_eq!(guard, SIGMA_F_GUARD);
        assert!((sf - DMatrix::identity(3, 3) * SIGMA_F_GUARD).amax() < 1e-20);
        let (_, guard) = sample_sigma_f(3, &TerminalConfig::default(), 1).unwrap();
        assert_eq!(guard, 0.0);
    }
}
