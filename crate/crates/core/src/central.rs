//! Whole-network solves of the localized covariance-steering program, in
//! the original variables and in the eigenbasis of `Theta`.

use nalgebra::DMatrix;

use crate::assemble::{central_program, Layout};
use crate::conic::{self, Backend, Settings, SolveReport};
use crate::error::Result;
use crate::problem::{transform, CsProblem};
use crate::sls::ResponsePair;
use crate::topology::Support;

/// Tolerances used when the centralized solution serves as a reference.
pub fn reference_settings() -> Settings {
    Settings {
        eps_abs: 1e-9,
        eps_rel: 1e-8,
        max_iter: 50_000,
        backend: Backend::preferred(),
        ..Settings::default()
    }
}

/// Solves over the free entries of `(phi_x, phi_u)`. A non-optimal solver
/// status is returned in the report, not as an error.
pub fn solve_centralized(cp: &CsProblem, settings: &Settings) -> Result<(ResponsePair, SolveReport)> {
    let layout = Layout::direct(cp);
    let qp = central_program(cp, &layout, None);
    let (z, report) = conic::solve(&qp, settings, None)?;
    Ok((layout.pair_from_z(&z), report))
}

/// Solves for `Psi = Phi V` where `Theta = V Lambda V^T`, then maps back.
pub fn solve_transformed(cp: &CsProblem, settings: &Settings) -> Result<(ResponsePair, SolveReport)> {
    let tp = transform(cp);
    let layout = Layout::transformed(cp, &tp);
    let qp = central_program(cp, &layout, Some(&tp));
    let (z, report) = conic::solve(&qp, settings, None)?;
    let mut p = layout.pair_from_z(&z);
    // mapping back through V leaves roundoff outside the support
    zero_outside(&mut p.phi_x, &cp.mask.support_x);
    zero_outside(&mut p.phi_u, &cp.mask.support_u);
    Ok((p, report))
}

fn zero_outside(m: &mut DMatrix<f64>, support: &Support) {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !support.get(r, c) {
                m[(r, c)] = 0.0;
            }
        }
    }
}
