//! Bridge to the Clarabel interior-point solver. The program is reduced
//! with the same equality elimination as the internal solver and handed
//! over as `min 1/2 y'Py + q'y  s.t.  A y = b,  svec(M(y)) in PSD`.

use std::time::Instant;

use clarabel::algebra::CscMatrix as ClCsc;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
// links the system BLAS/LAPACK the PSD cone needs
use openblas_src as _;

use super::reduce::{reduce, Reduction};
use super::sparse::{inf_norm, CscMatrix};
use super::{ConicQp, Settings, SolveReport, Status};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClarabelWorkspace {
    qp: ConicQp,
    settings: Settings,
    red: Reduction,
    pz0: Vec<f64>,
    p_upper: ClCsc<f64>,
    a: ClCsc<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    m_eq: usize,
    size: usize,
    failure: Option<String>,
    z: Vec<f64>,
}

fn to_clarabel(m: &CscMatrix) -> ClCsc<f64> {
    ClCsc::new(m.nrows, m.ncols, m.colptr.clone(), m.rowind.clone(), m.values.clone())
}

/// Position of `(row, col)` in the column-wise upper-triangle vector.
fn triu_index(row: usize, col: usize) -> usize {
    let (r, c) = (row.min(col), row.max(col));
    c * (c + 1) / 2 + r
}

fn tolerance(settings: &Settings, qp: &ConicQp) -> f64 {
    settings.eps_abs + settings.eps_rel * inf_norm(&qp.b_eq)
}

impl ClarabelWorkspace {
    pub fn new(qp: &ConicQp, settings: &Settings) -> Result<Self> {
        qp.validate()?;
        if !(settings.eps_abs > 0.0 && settings.eps_rel >= 0.0) {
            return Err(Error::Argument("tolerances must be positive".into()));
        }
        let red = reduce(qp, tolerance(settings, qp));
        let pz0 = qp.p.mul_vec(&red.z0);
        let rq = red.apply(qp);
        let n = rq.num_vars;
        let upper: Vec<_> = rq.p.triplets().filter(|&(i, j, _)| i <= j).collect();
        let p_upper = to_clarabel(&CscMatrix::from_triplets(n, n, &upper));

        // rows: kept equalities, then -svec(M_k) so that s = svec(M(y))
        let m_eq = rq.a_eq.nrows;
        let mut trip: Vec<_> = rq.a_eq.triplets().collect();
        let mut b = rq.b_eq.clone();
        let size = rq.psd.as_ref().map_or(0, |blk| blk.size);
        if let Some(blk) = &rq.psd {
            let len = size * (size + 1) / 2;
            for c in &blk.coeffs {
                let f = if c.row == c.col { 1.0 } else { std::f64::consts::SQRT_2 };
                trip.push((m_eq + triu_index(c.row, c.col), c.var, -f * c.value));
            }
            let off = crate::linalg::symmetrize(&blk.offset);
            let mut h = vec![0.0; len];
            for col in 0..size {
                for row in 0..=col {
                    let f = if row == col { 1.0 } else { std::f64::consts::SQRT_2 };
                    h[triu_index(row, col)] = f * off[(row, col)];
                }
            }
            b.extend(h);
        }
        let a = to_clarabel(&CscMatrix::from_triplets(b.len(), n, &trip));
        let z = red.z0.clone();
        Ok(Self {
            qp: qp.clone(),
            settings: settings.clone(),
            q: rq.q.clone(),
            failure: red.failure.clone(),
            red,
            pz0,
            p_upper,
            a,
            b,
            m_eq,
            size,
            z,
        })
    }

    pub fn qp(&self) -> &ConicQp {
        &self.qp
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn update_q(&mut self, q: &[f64]) -> Result<()> {
        if q.len() != self.qp.num_vars {
            return Err(Error::Dimension("linear term has the wrong length".into()));
        }
        self.qp.q = q.to_vec();
        self.q = self.red.reduced_q(&self.pz0, q);
        Ok(())
    }

    pub fn update_constant(&mut self, c: f64) {
        self.qp.c = c;
    }

    pub fn z(&self) -> Vec<f64> {
        self.z.clone()
    }

    pub fn solve(&mut self) -> (Vec<f64>, SolveReport) {
        let start = Instant::now();
        let tol = tolerance(&self.settings, &self.qp);
        if let Some(fam) = self.failure.clone() {
            let mut rep = self.report(Status::InfeasibleSuspect, 0, start, tol);
            rep.diagnosis = Some(format!("{fam}: equality rows are inconsistent"));
            return (self.z.clone(), rep);
        }
        let mut cones = Vec::new();
        if self.m_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(self.m_eq));
        }
        if self.size > 0 {
            cones.push(SupportedConeT::PSDTriangleConeT(self.size));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(self.settings.max_iter.min(u32::MAX as usize) as u32)
            .max_threads(1)
            .build()
            .expect("valid solver settings");
        let solved = DefaultSolver::new(&self.p_upper, &self.q, &self.a, &self.b, &cones, settings).map(|mut s| {
            s.solve();
            s
        });
        let solver = match solved {
            Ok(s) => s,
            Err(e) => {
                let mut rep = self.report(Status::MaxIter, 0, start, tol);
                rep.diagnosis = Some(format!("solver setup failed: {e}"));
                return (self.z.clone(), rep);
            }
        };
        let sol = &solver.solution;
        let finite = sol.x.iter().all(|v| v.is_finite());
        if finite {
            self.z = self.red.lift(&sol.x);
        }
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved if finite => Status::Optimal,
            SolverStatus::PrimalInfeasible
            | SolverStatus::DualInfeasible
            | SolverStatus::AlmostPrimalInfeasible
            | SolverStatus::AlmostDualInfeasible => Status::InfeasibleSuspect,
            _ => Status::MaxIter,
        };
        let mut rep = self.report(status, sol.iterations as usize, start, tol);
        if rep.status == Status::Optimal && (rep.primal_residual > tol * (1.0 + inf_norm(&self.qp.b_eq)) || rep.psd_residual > tol) {
            rep.status = Status::MaxIter;
        }
        if rep.status != Status::Optimal {
            rep.diagnosis = Some(format!("interior-point solver stopped with status {:?}", sol.status));
        }
        (self.z.clone(), rep)
    }

    fn report(&self, status: Status, iterations: usize, start: Instant, tol: f64) -> SolveReport {
        SolveReport {
            status,
            objective: self.qp.objective(&self.z),
            primal_residual: self.qp.eq_residual(&self.z),
            psd_residual: self.qp.psd_residual(&self.z),
            tolerance: tol,
            iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            rho: 0.0,
            diagnosis: None,
            fixed_point_trace: Vec::new(),
        }
    }
}
