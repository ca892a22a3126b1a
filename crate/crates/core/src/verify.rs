//! Invariant battery for a response pair against its problem.

use serde::Serialize;

use crate::linalg::min_eigenvalue;
use crate::problem::{terminal_covariance, terminal_mean_residual, CsProblem};
use crate::sls::{check_parametrization, ResponsePair};

pub const PARAMETRIZATION_TOL: f64 = 1e-6;
pub const STRUCTURE_TOL: f64 = 1e-9;
pub const TERMINAL_MEAN_TOL: f64 = 1e-6;
pub const LMI_TOL: f64 = 1e-6;

pub const CHECK_PARAMETRIZATION: &str = "parametrization";
pub const CHECK_BLT: &str = "block lower triangular";
pub const CHECK_DIAGONAL: &str = "identity diagonal blocks";
pub const CHECK_LOCALITY: &str = "locality";
pub const CHECK_TERMINAL_MEAN: &str = "terminal mean";
pub const CHECK_LMI: &str = "LMI";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Measured violation; larger is worse.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            value,
            threshold,
            passed: value.is_finite() && value <= threshold,
        }
    }
}

/// Largest magnitude of any entry outside the locality mask. A correct
/// solution has these entries exactly zero.
pub fn locality_violation(cp: &CsProblem, p: &ResponsePair) -> f64 {
    let mut worst = 0.0f64;
    for (mat, sup) in [(&p.phi_x, &cp.mask.support_x), (&p.phi_u, &cp.mask.support_u)] {
        for c in 0..mat.ncols() {
            for r in 0..mat.nrows() {
                if !sup.get(r, c) {
                    worst = worst.max(mat[(r, c)].abs());
                }
            }
        }
    }
    worst
}

/// `max(0, -lambda_min(Sigma_f - Cov[x_T]))`.
pub fn lmi_violation(cp: &CsProblem, p: &ResponsePair) -> f64 {
    let gap = &cp.terminal.sigma_f - terminal_covariance(p, &cp.noise);
    (-min_eigenvalue(&gap)).max(0.0)
}

/// Runs every check in a fixed order. Dimension mismatches are reported
/// as a failed parametrization check.
pub fn verify(cp: &CsProblem, p: &ResponsePair) -> Vec<Check> {
    let param = check_parametrization(&cp.dynamics, p).unwrap_or(f64::INFINITY);
    let mut checks = vec![Check::new(CHECK_PARAMETRIZATION, param, PARAMETRIZATION_TOL)];
    if !param.is_finite() {
        return checks;
    }
    checks.push(Check::new(CHECK_BLT, p.blt_violation(), STRUCTURE_TOL));
    checks.push(Check::new(CHECK_DIAGONAL, p.diagonal_identity_error(), STRUCTURE_TOL));
    checks.push(Check::new(CHECK_LOCALITY, locality_violation(cp, p), 0.0));
    checks.push(Check::new(
        CHECK_TERMINAL_MEAN,
        terminal_mean_residual(p, &cp.noise, &cp.terminal),
        TERMINAL_MEAN_TOL,
    ));
    checks.push(Check::new(CHECK_LMI, lmi_violation(cp, p), LMI_TOL));
    checks
}

pub fn first_failure(checks: &[Check]) -> Option<&Check> {
    checks.iter().find(|c| !c.passed)
}
