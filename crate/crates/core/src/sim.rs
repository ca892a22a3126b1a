//! Closed-loop validation of a synthesized controller: moment trajectories
//! from the responses, Monte-Carlo rollouts through the realization, and
//! the covariance deviation norms.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, frob_diff, psd_factor, symmetrize};
use crate::problem::CsProblem;
use crate::rng;
use crate::sls::{check_parametrization, RealizationState, ResponsePair};

/// Largest parametrization residual accepted before computing moments.
pub const PARAMETRIZATION_TOL: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-9;

/// Spectral, Frobenius and nuclear norm of a symmetric difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationNorms {
    pub spectral: f64,
    pub frobenius: f64,
    pub nuclear: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopStats {
    /// `E[x_t]`, `t = 0..=T`.
    pub mean_traj: Vec<DVector<f64>>,
    pub cov_traj: Vec<DMatrix<f64>>,
    /// `E[u_t]`, `t = 0..T`.
    pub input_mean_traj: Vec<DVector<f64>>,
    /// Norms of `Sigma_f - Cov[x_t]`.
    pub deviation: Vec<DeviationNorms>,
    /// Norms of `Cov[x_T] - Cov[x_t]`.
    pub deviation_terminal: Vec<DeviationNorms>,
}

impl ClosedLoopStats {
    fn from_moments(
        mean_traj: Vec<DVector<f64>>,
        cov_traj: Vec<DMatrix<f64>>,
        input_mean_traj: Vec<DVector<f64>>,
        sigma_f: &DMatrix<f64>,
    ) -> Result<Self> {
        let last = cov_traj.last().expect("at least the initial state").clone();
        let deviation = cov_traj.iter().map(|c| deviation_norms(sigma_f, c)).collect::<Result<_>>()?;
        let deviation_terminal = cov_traj.iter().map(|c| deviation_norms(&last, c)).collect::<Result<_>>()?;
        Ok(Self {
            mean_traj,
            cov_traj,
            input_mean_traj,
            deviation,
            deviation_terminal,
        })
    }

    pub fn horizon(&self) -> usize {
        self.input_mean_traj.len()
    }

    pub fn terminal_mean(&self) -> &DVector<f64> {
        self.mean_traj.last().expect("nonempty trajectory")
    }

    pub fn terminal_cov(&self) -> &DMatrix<f64> {
        self.cov_traj.last().expect("nonempty trajectory")
    }
}

/// Norms of `sigma_f - cov`. Both arguments must be symmetric.
pub fn deviation_norms(sigma_f: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DeviationNorms> {
    if sigma_f.shape() != cov.shape() || !sigma_f.is_square() {
        return Err(Error::Dimension("deviation norms need square matrices of equal size".into()));
    }
    if asymmetry(sigma_f) > SYMMETRY_TOL || asymmetry(cov) > SYMMETRY_TOL {
        return Err(Error::Argument("deviation norms need symmetric matrices".into()));
    }
    let diff = symmetrize(&(sigma_f - cov));
    let lam = SymmetricEigen::new(diff.clone()).eigenvalues;
    Ok(DeviationNorms {
        spectral: lam.iter().fold(0.0f64, |m, l| m.max(l.abs())),
        frobenius: diff.norm(),
        nuclear: lam.iter().map(|l| l.abs()).sum(),
    })
}

fn check_responses(p: &ResponsePair, cp: &CsProblem) -> Result<()> {
    let res = check_parametrization(&cp.dynamics, p)?;
    if !(res <= PARAMETRIZATION_TOL) {
        return Err(Error::Argument(format!(
            "responses violate the parametrization (residual {res:.3e})"
        )));
    }
    Ok(())
}

/// Moments of the closed loop computed from the responses.
pub fn analytic_stats(p: &ResponsePair, cp: &CsProblem) -> Result<ClosedLoopStats> {
    check_responses(p, cp)?;
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let mu_w = cp.noise.mu_w();
    let sw = cp.noise.sigma_w();
    let mean_x = &p.phi_x * &mu_w;
    let mean_u = &p.phi_u * &mu_w;
    let mut mean_traj = Vec::with_capacity(t_h + 1);
    let mut cov_traj = Vec::with_capacity(t_h + 1);
    for t in 0..=t_h {
        mean_traj.push(mean_x.rows(t * n, n).into_owned());
        let rows = p.phi_x.rows(t * n, n);
        cov_traj.push(symmetrize(&(rows * &sw * rows.transpose())));
    }
    let input_mean_traj = (0..t_h).map(|t| mean_u.rows(t * m, m).into_owned()).collect();
    ClosedLoopStats::from_moments(mean_traj, cov_traj, input_mean_traj, &cp.terminal.sigma_f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarlo {
    pub samples: usize,
    pub empirical: ClosedLoopStats,
    pub analytic: ClosedLoopStats,
    /// `max_t ||C_emp(t) - C(t)||_F / ||C(t)||_F` over steps with nonzero `C(t)`.
    pub max_cov_gap: f64,
    /// The same ratio at `t = T`.
    pub terminal_cov_gap: f64,
}

/// Sums of one group of rollouts, centred on the analytic means.
#[derive(Clone)]
struct Accum {
    count: usize,
    sx: Vec<DVector<f64>>,
    sxx: Vec<DMatrix<f64>>,
    su: Vec<DVector<f64>>,
}

impl Accum {
    fn zeros(n: usize, m: usize, t_h: usize) -> Self {
        Self {
            count: 0,
            sx: vec![DVector::zeros(n); t_h + 1],
            sxx: vec![DMatrix::zeros(n, n); t_h + 1],
            su: vec![DVector::zeros(m); t_h],
        }
    }

    fn merge(mut self, other: &Accum) -> Self {
        self.count += other.count;
        for (a, b) in self.sx.iter_mut().zip(&other.sx) {
            *a += b;
        }
        for (a, b) in self.sxx.iter_mut().zip(&other.sxx) {
            *a += b;
        }
        for (a, b) in self.su.iter_mut().zip(&other.su) {
            *a += b;
        }
        self
    }
}

/// Fixed-order pairwise reduction, independent of thread scheduling.
fn pairwise(parts: &[Accum]) -> Accum {
    match parts.len() {
        1 => parts[0].clone(),
        len => {
            let (l, r) = parts.split_at(len / 2);
            pairwise(l).merge(&pairwise(r))
        }
    }
}

const ROLLOUTS_PER_TASK: usize = 256;

/// Rolls the true dynamics with the realized controller. Rollout `k` draws
/// its initial state and disturbances from its own stream, so results do
/// not depend on the thread count.
pub fn monte_carlo(p: &ResponsePair, cp: &CsProblem, samples: usize, seed: u64) -> Result<MonteCarlo> {
    if samples < 2 {
        return Err(Error::Argument("Monte-Carlo needs at least two samples".into()));
    }
    let analytic = analytic_stats(p, cp)?;
    let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
    let l0 = psd_factor(&cp.noise.sigma0);
    let lw: Vec<DMatrix<f64>> = cp.noise.w.iter().map(psd_factor).collect();
    let centre_x = &analytic.mean_traj;
    let centre_u = &analytic.input_mean_traj;
    let net = &cp.network;

    let tasks: Vec<(usize, usize)> = (0..samples)
        .step_by(ROLLOUTS_PER_TASK)
        .map(|s| (s, (s + ROLLOUTS_PER_TASK).min(samples)))
        .collect();
    let parts: Vec<Accum> = tasks
        .par_iter()
        .map(|&(lo, hi)| -> Result<Accum> {
            let mut acc = Accum::zeros(n, m, t_h);
            for k in lo..hi {
                let mut rng = rng::stream(seed, rng::STREAM_MONTE_CARLO + k as u64);
                let mut normal = |len: usize| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mut x = &cp.noise.mu0 + &l0 * normal(n);
                let mut ctrl = RealizationState::new();
                for t in 0..t_h {
                    let dx = &x - &centre_x[t];
                    acc.sx[t] += &dx;
                    acc.sxx[t].ger(1.0, &dx, &dx, 1.0);
                    let u = ctrl.realize_step(p, &x)?;
                    acc.su[t] += &u - &centre_u[t];
                    let w = &lw[t] * normal(n);
                    x = net.step(t, &x, &u, &w);
                }
                let dx = &x - &centre_x[t_h];
                acc.sx[t_h] += &dx;
                acc.sxx[t_h].ger(1.0, &dx, &dx, 1.0);
                acc.count += 1;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let total = pairwise(&parts);

    let ns = samples as f64;
    let mut mean_traj = Vec::with_capacity(t_h + 1);
    let mut cov_traj = Vec::with_capacity(t_h + 1);
    for t in 0..=t_h {
        let d = &total.sx[t] / ns;
        // unbiased estimate from sums centred on a fixed point
        let cov = (&total.sxx[t] - &d * d.transpose() * ns) / (ns - 1.0);
        mean_traj.push(&centre_x[t] + d);
        cov_traj.push(symmetrize(&cov));
    }
    let input_mean_traj = (0..t_h).map(|t| &centre_u[t] + &total.su[t] / ns).collect();
    let empirical = ClosedLoopStats::from_moments(mean_traj, cov_traj, input_mean_traj, &cp.terminal.sigma_f)?;

    let gap = |t: usize| {
        let reference = analytic.cov_traj[t].norm();
        (reference > 0.0).then(|| frob_diff(&empirical.cov_traj[t], &analytic.cov_traj[t]) / reference)
    };
    let max_cov_gap = (0..=t_h).filter_map(gap).fold(0.0, f64::max);
    let terminal_cov_gap = gap(t_h).unwrap_or(0.0);
    Ok(MonteCarlo {
        samples,
        empirical,
        analytic,
        max_cov_gap,
        terminal_cov_gap,
    })
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

pub const TRAJECTORY_CSV_HEADER: &str = "t,subsystem,component,state_mean,input_mean,\
dev_spectral,dev_frobenius,dev_nuclear,dev_terminal_spectral,dev_terminal_frobenius,dev_terminal_nuclear";

/// One row per time, subsystem and component. `input_mean` is empty at
/// `t = T` and for components beyond the subsystem's input size, and
/// `state_mean` likewise beyond its state size. The deviation columns
/// repeat the network-wide norms on every row of a time step.
pub fn write_trajectory_csv<W: Write>(out: &mut W, stats: &ClosedLoopStats, dims: &[(usize, usize)]) -> Result<()> {
    writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
    let t_h = stats.horizon();
    for t in 0..=t_h {
        let dev = &stats.deviation[t];
        let dev_t = &stats.deviation_terminal[t];
        let norms = [
            dev.spectral,
            dev.frobenius,
            dev.nuclear,
            dev_t.spectral,
            dev_t.frobenius,
            dev_t.nuclear,
        ]
        .map(sci)
        .join(",");
        let (mut xo, mut uo) = (0, 0);
        for (i, &(ni, mi)) in dims.iter().enumerate() {
            for k in 0..ni.max(mi) {
                let xs = if k < ni { sci(stats.mean_traj[t][xo + k]) } else { String::new() };
                let us = if k < mi && t < t_h {
                    sci(stats.input_mean_traj[t][uo + k])
                } else {
                    String::new()
                };
                writeln!(out, "{t},{i},{k},{xs},{us},{norms}")?;
            }
            xo += ni;
            uo += mi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms_of_diagonal_difference() {
        let sf = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0]));
        let d = deviation_norms(&sf, &c).unwrap();
        assert!((d.spectral - 4.0).abs() < 1e-12);
        assert!((d.frobenius - 5.0).abs() < 1e-12);
        assert!((d.nuclear - 7.0).abs() < 1e-12);
        let z = deviation_norms(&sf, &sf).unwrap();
        assert_eq!((z.spectral, z.frobenius, z.nuclear), (0.0, 0.0, 0.0));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(deviation_norms(&a, &DMatrix::identity(2, 2)), Err(Error::Argument(_))));
    }

    #[test]
    fn pairwise_sum_matches_sequential_count() {
        let parts: Vec<Accum> = (0..7)
            .map(|k| {
                let mut a = Accum::zeros(1, 1, 1);
                a.count = k;
                a.sx[0][0] = k as f64;
                a
            })
            .collect();
        let total = pairwise(&parts);
        assert_eq!(total.count, 21);
        assert_eq!(total.sx[0][0], 21.0);
    }
}
