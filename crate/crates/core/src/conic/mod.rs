//! Quadratic programs with affine equalities and one linear matrix
//! inequality, solved by an operator-splitting method.

mod admm;
#[cfg(feature = "clarabel")]
mod clarabel;
pub mod ldl;
mod reduce;
pub mod sparse;

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use admm::{Settings, Workspace};
#[cfg(feature = "clarabel")]
pub use clarabel::ClarabelWorkspace;
use sparse::CscMatrix;

/// Which solver runs a program.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// The built-in operator-splitting solver.
    #[default]
    Internal,
    /// The Clarabel interior-point solver (cargo feature `clarabel`).
    Clarabel,
}

impl Backend {
    /// Clarabel when compiled in, otherwise the built-in solver.
    pub fn preferred() -> Self {
        if cfg!(feature = "clarabel") {
            Backend::Clarabel
        } else {
            Backend::Internal
        }
    }

    pub fn is_available(self) -> bool {
        match self {
            Backend::Internal => true,
            Backend::Clarabel => cfg!(feature = "clarabel"),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Internal => "internal",
            Backend::Clarabel => "clarabel",
        })
    }
}

/// A program set up for repeated solves with a changing linear term.
#[derive(Debug, Clone)]
pub enum Session {
    Internal(Workspace),
    #[cfg(feature = "clarabel")]
    Clarabel(ClarabelWorkspace),
}

impl Session {
    /// Sets up `qp` for the backend named in `settings`.
    pub fn new(qp: &ConicQp, settings: &Settings) -> Result<Self> {
        match settings.backend {
            Backend::Internal => Ok(Session::Internal(Workspace::new(qp, settings)?)),
            #[cfg(feature = "clarabel")]
            Backend::Clarabel => Ok(Session::Clarabel(ClarabelWorkspace::new(qp, settings)?)),
            #[cfg(not(feature = "clarabel"))]
            Backend::Clarabel => Err(Error::Unsupported("built without the clarabel feature".into())),
        }
    }

    pub fn qp(&self) -> &ConicQp {
        match self {
            Session::Internal(w) => w.qp(),
            #[cfg(feature = "clarabel")]
            Session::Clarabel(w) => w.qp(),
        }
    }

    pub fn update_q(&mut self, q: &[f64]) -> Result<()> {
        match self {
            Session::Internal(w) => w.update_q(q),
            #[cfg(feature = "clarabel")]
            Session::Clarabel(w) => w.update_q(q),
        }
    }

    pub fn update_constant(&mut self, c: f64) {
        match self {
            Session::Internal(w) => w.update_constant(c),
            #[cfg(feature = "clarabel")]
            Session::Clarabel(w) => w.update_constant(c),
        }
    }

    /// Primal starting point; the interior-point backend starts cold and
    /// ignores it.
    pub fn warm_start(&mut self, z: &[f64]) -> Result<()> {
        match self {
            Session::Internal(w) => w.warm_start(z),
            #[cfg(feature = "clarabel")]
            Session::Clarabel(_) => Ok(()),
        }
    }

    pub fn solve(&mut self) -> (Vec<f64>, SolveReport) {
        match self {
            Session::Internal(w) => w.solve(),
            #[cfg(feature = "clarabel")]
            Session::Clarabel(w) => w.solve(),
        }
    }
}

/// One-shot solve, optionally warm-started from `z0`.
pub fn solve(qp: &ConicQp, settings: &Settings, z0: Option<&[f64]>) -> Result<(Vec<f64>, SolveReport)> {
    let mut s = Session::new(qp, settings)?;
    if let Some(z) = z0 {
        s.warm_start(z)?;
    }
    Ok(s.solve())
}

/// One coefficient of the matrix map: `M_var[row, col] = M_var[col, row] = value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdCoeff {
    pub var: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `M(z) = offset + sum_k z_k M_k`, required to be PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdBlock {
    pub size: usize,
    pub offset: DMatrix<f64>,
    pub coeffs: Vec<PsdCoeff>,
}

impl PsdBlock {
    pub fn eval(&self, z: &[f64]) -> DMatrix<f64> {
        let mut m = self.offset.clone();
        for c in &self.coeffs {
            let v = c.value * z[c.var];
            m[(c.row, c.col)] += v;
            if c.row != c.col {
                m[(c.col, c.row)] += v;
            }
        }
        m
    }
}

/// A labelled range of equality rows, used to name the failing family in
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowFamily {
    pub name: String,
    pub rows: Range<usize>,
    /// Rows that only couple small groups of variables and may be solved
    /// out before iterating.
    pub eliminate: bool,
}

/// `min 1/2 z'Pz + q'z + c  s.t.  A z = b,  M(z) PSD`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicQp {
    pub num_vars: usize,
    /// Full symmetric storage.
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub c: f64,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub families: Vec<RowFamily>,
    pub psd: Option<PsdBlock>,
    pub psd_name: String,
}

impl ConicQp {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        if self.p.nrows != n || self.p.ncols != n || self.q.len() != n || self.a_eq.ncols != n {
            return Err(Error::Dimension("conic program blocks disagree on the variable count".into()));
        }
        if self.a_eq.nrows != self.b_eq.len() {
            return Err(Error::Dimension("equality matrix and right-hand side differ in length".into()));
        }
        if !self.p.is_symmetric(1e-9) {
            return Err(Error::Argument("P is not symmetric".into()));
        }
        if let Some(psd) = &self.psd {
            if psd.offset.shape() != (psd.size, psd.size) {
                return Err(Error::Dimension("matrix-map offset has the wrong size".into()));
            }
            if psd.coeffs.iter().any(|c| c.var >= n || c.row >= psd.size || c.col >= psd.size) {
                return Err(Error::Dimension("matrix-map coefficient out of range".into()));
            }
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let pz = self.p.mul_vec(z);
        0.5 * sparse::dot(z, &pz) + sparse::dot(&self.q, z) + self.c
    }

    /// `|| A z - b ||_inf`.
    pub fn eq_residual(&self, z: &[f64]) -> f64 {
        let mut r = self.a_eq.mul_vec(z);
        for (ri, bi) in r.iter_mut().zip(&self.b_eq) {
            *ri -= bi;
        }
        sparse::inf_norm(&r)
    }

    /// Per-family `inf`-norm equality residuals.
    pub fn family_residuals(&self, z: &[f64]) -> Vec<(String, f64)> {
        let mut r = self.a_eq.mul_vec(z);
        for (ri, bi) in r.iter_mut().zip(&self.b_eq) {
            *ri -= bi;
        }
        self.families
            .iter()
            .map(|f| (f.name.clone(), sparse::inf_norm(&r[f.rows.clone()])))
            .collect()
    }

    /// `max(0, -lambda_min(M(z)))`; zero without a matrix block.
    pub fn psd_residual(&self, z: &[f64]) -> f64 {
        self.psd
            .as_ref()
            .map_or(0.0, |b| (-crate::linalg::min_eigenvalue(&b.eval(z))).max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Optimal,
    MaxIter,
    InfeasibleSuspect,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Optimal => "optimal",
            Status::MaxIter => "max_iter",
            Status::InfeasibleSuspect => "infeasible-suspect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: Status,
    pub objective: f64,
    /// `|| A z - b ||_inf` recomputed from the returned point.
    pub primal_residual: f64,
    /// `max(0, -lambda_min(M(z)))`.
    pub psd_residual: f64,
    /// Feasibility threshold the status was judged against.
    pub tolerance: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed_point_trace: Vec<f64>,
}

/// Eigenvalue clamping onto the PSD cone.
pub fn project_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = crate::linalg::symmetrize(s);
    let eig = sym.clone().symmetric_eigen();
    let neg: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] < 0.0).collect();
    let mut out = sym;
    for k in neg {
        let v = eig.eigenvectors.column(k);
        out.ger(-eig.eigenvalues[k], &v, &v, 1.0);
    }
    crate::linalg::symmetrize(&out)
}

pub(crate) fn svec_len(size: usize) -> usize {
    size * (size + 1) / 2
}

/// Lower-triangle, column-major position of `(i, j)` with `i >= j`.
pub(crate) fn svec_index(size: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * size - j * (j + 1) / 2 + i
}

pub(crate) fn svec(m: &DMatrix<f64>, out: &mut [f64]) {
    let size = m.nrows();
    let mut k = 0;
    for j in 0..size {
        out[k] = m[(j, j)];
        k += 1;
        for i in (j + 1)..size {
            out[k] = std::f64::consts::SQRT_2 * m[(i, j)];
            k += 1;
        }
    }
}

pub(crate) fn smat(v: &[f64], size: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(size, size);
    let mut k = 0;
    for j in 0..size {
        m[(j, j)] = v[k];
        k += 1;
        for i in (j + 1)..size {
            let x = v[k] * std::f64::consts::FRAC_1_SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}
