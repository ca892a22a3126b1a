//! Operator splitting between an equality-constrained quadratic step and a
//! PSD projection. The quadratic step solves a quasi-definite KKT system
//! whose factorization is cached; equalities hold to refinement accuracy
//! at every iterate, so only the matrix constraint is split.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ldl::LdlFactor;
use super::reduce::{reduce, Reduction};
use super::sparse::{dot, inf_norm, CscMatrix};
use super::{smat, svec, svec_index, svec_len, Backend, ConicQp, SolveReport, Status};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Initial penalty.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation in (0, 2).
    pub alpha: f64,
    /// Regularization of the equality block; removed again by refinement.
    pub delta: f64,
    pub refine_steps: usize,
    pub adaptive_rho: bool,
    pub adapt_interval: usize,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub record_trace: bool,
    /// Chosen per run from the solver configuration, not stored with it.
    #[serde(skip)]
    pub backend: Backend,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: 20_000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            delta: 1e-7,
            refine_steps: 20,
            adaptive_rho: true,
            adapt_interval: 25,
            scaling_iters: 10,
            check_interval: 5,
            record_trace: false,
            backend: Backend::Internal,
        }
    }
}

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

fn clamp_scale(v: f64) -> f64 {
    if v < MIN_SCALE {
        1.0
    } else {
        v.min(MAX_SCALE)
    }
}

/// Solver state for one conic program. Keeps the scaled data, the cached
/// factorization and the last iterate, so repeated solves with a changed
/// linear term start warm.
#[derive(Debug, Clone)]
pub struct Workspace {
    qp: ConicQp,
    /// Eliminated equalities: the iterate lives in `z = z0 + N y`.
    red: Reduction,
    pz0: Vec<f64>,
    settings: Settings,
    n: usize,
    m_eq: usize,
    m_psd: usize,
    size: usize,
    /// Kept equality rows of the original program.
    kept_rows: Vec<usize>,
    // scaled data
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    b: Vec<f64>,
    g: CscMatrix,
    h: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    e_psd: f64,
    c: f64,
    // KKT
    kkt_base: Vec<f64>,
    kkt_gtg: Vec<f64>,
    factor: LdlFactor,
    rho: f64,
    // iterate (scaled)
    x: Vec<f64>,
    s: Vec<f64>,
    y: Vec<f64>,
    nu: Vec<f64>,
    /// Whether `x` already satisfies the equalities; relaxation keeps it so.
    x_on_affine: bool,
    presolve_failure: Option<String>,
}

impl Workspace {
    pub fn new(qp: &ConicQp, settings: &Settings) -> Result<Self> {
        qp.validate()?;
        if !(settings.eps_abs > 0.0 && settings.eps_rel >= 0.0) {
            return Err(Error::Argument("tolerances must be positive".into()));
        }
        let tol = settings.eps_abs + settings.eps_rel * inf_norm(&qp.b_eq);
        let red = reduce(qp, tol);
        let pz0 = qp.p.mul_vec(&red.z0);
        let orig = qp;
        let qp = &red.apply(orig);
        let n = qp.num_vars;

        // presolve: drop empty rows (checking consistency) and exact duplicates
        let at = qp.a_eq.transpose();
        let mut kept = Vec::new();
        let mut presolve_failure = red.failure.clone();
        let mut seen = std::collections::HashMap::new();
        for r in 0..qp.a_eq.nrows {
            let span = at.colptr[r]..at.colptr[r + 1];
            let nz = at.values[span.clone()].iter().any(|v| *v != 0.0);
            if !nz {
                if qp.b_eq[r].abs() > tol && presolve_failure.is_none() {
                    presolve_failure = Some(family_of(qp, r));
                }
                continue;
            }
            let key: Vec<(usize, u64)> = span
                .clone()
                .map(|p| (at.rowind[p], at.values[p].to_bits()))
                .chain(std::iter::once((usize::MAX, qp.b_eq[r].to_bits())))
                .collect();
            if seen.insert(key, r).is_none() {
                kept.push(r);
            }
        }
        let mut a = qp.a_eq.select_rows(&kept);
        let mut b: Vec<f64> = kept.iter().map(|&r| qp.b_eq[r]).collect();
        let m_eq = kept.len();

        let (size, mut g, mut h) = match &qp.psd {
            Some(blk) => {
                let len = svec_len(blk.size);
                let trip: Vec<_> = blk
                    .coeffs
                    .iter()
                    .map(|c| {
                        let f = if c.row == c.col { 1.0 } else { std::f64::consts::SQRT_2 };
                        (svec_index(blk.size, c.row, c.col), c.var, f * c.value)
                    })
                    .collect();
                let mut h = vec![0.0; len];
                svec(&crate::linalg::symmetrize(&blk.offset), &mut h);
                (blk.size, CscMatrix::from_triplets(len, n, &trip), h)
            }
            None => (0, CscMatrix::zeros(0, n), Vec::new()),
        };
        let m_psd = g.nrows;

        // Ruiz equilibration; the matrix rows share one scalar to keep the cone.
        let mut p = qp.p.clone();
        let mut q = qp.q.clone();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m_eq];
        let mut e_psd = 1.0;
        let mut c = 1.0;
        for _ in 0..settings.scaling_iters {
            let (pc, ac, gc) = (p.col_amax(), a.col_amax(), g.col_amax());
            let dt: Vec<f64> = (0..n).map(|j| 1.0 / clamp_scale(pc[j].max(ac[j]).max(gc[j]).sqrt())).collect();
            let et: Vec<f64> = a.row_amax().iter().map(|v| 1.0 / clamp_scale(v.sqrt())).collect();
            let gmax = g.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gt = 1.0 / clamp_scale(gmax.sqrt());
            p.scale(&dt, &dt);
            a.scale(&et, &dt);
            let gl = vec![gt; m_psd];
            g.scale(&gl, &dt);
            for j in 0..n {
                q[j] *= dt[j];
                d[j] *= dt[j];
            }
            for i in 0..m_eq {
                e[i] *= et[i];
            }
            e_psd *= gt;
            let pc = p.col_amax();
            let mean = if n > 0 { pc.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let ct = 1.0 / clamp_scale(mean.max(inf_norm(&q)));
            p.values.iter_mut().for_each(|v| *v *= ct);
            q.iter_mut().for_each(|v| *v *= ct);
            c *= ct;
        }
        for i in 0..m_eq {
            b[i] *= e[i];
        }
        h.iter_mut().for_each(|v| *v *= e_psd);

        // KKT pattern: [P + sigma I + rho G'G, A'; A, -delta I], upper part
        let dim = n + m_eq;
        let mut base: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in p.triplets() {
            if i <= j {
                base.push((i, j, v));
            }
        }
        for j in 0..n {
            base.push((j, j, settings.sigma));
        }
        for (i, j, v) in a.triplets() {
            base.push((j, n + i, v));
        }
        for i in 0..m_eq {
            base.push((n + i, n + i, -settings.delta));
        }
        let gtg = upper_gram(&g);
        let mut pattern: Vec<_> = base.iter().map(|&(i, j, _)| (i, j, 0.0)).collect();
        pattern.extend(gtg.iter().map(|&(i, j, _)| (i, j, 0.0)));
        let pattern = CscMatrix::from_triplets(dim, dim, &pattern);
        let kkt_base = scatter(&pattern, &base);
        let kkt_gtg = scatter(&pattern, &gtg);
        let mut factor = LdlFactor::analyze(&pattern).map_err(solver_err)?;
        let rho = settings.rho;
        let vals: Vec<f64> = kkt_base.iter().zip(&kkt_gtg).map(|(b, g)| b + rho * g).collect();
        factor.factor(&vals, n).map_err(solver_err)?;

        let kept = kept.iter().map(|&k| red.kept_rows[k]).collect();
        let mut ws = Self {
            qp: orig.clone(),
            red,
            pz0,
            settings: settings.clone(),
            n,
            m_eq,
            m_psd,
            size,
            kept_rows: kept,
            p,
            q,
            a,
            b,
            g,
            h,
            d,
            e,
            e_psd,
            c,
            kkt_base,
            kkt_gtg,
            factor,
            rho,
            x: vec![0.0; n],
            s: vec![0.0; m_psd],
            y: vec![0.0; m_psd],
            nu: vec![0.0; m_eq],
            x_on_affine: false,
            presolve_failure,
        };
        let s0 = ws.project(&ws.h.clone());
        ws.s = s0;
        Ok(ws)
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut Settings {
        &mut self.settings
    }

    pub fn qp(&self) -> &ConicQp {
        &self.qp
    }

    /// Replaces the linear objective term (unscaled).
    pub fn update_q(&mut self, q: &[f64]) -> Result<()> {
        if q.len() != self.qp.num_vars {
            return Err(Error::Dimension("linear term has the wrong length".into()));
        }
        self.qp.q = q.to_vec();
        let qy = self.red.reduced_q(&self.pz0, q);
        for j in 0..self.n {
            self.q[j] = self.c * self.d[j] * qy[j];
        }
        Ok(())
    }

    pub fn update_constant(&mut self, c: f64) {
        self.qp.c = c;
    }

    /// Starts from primal point `z`, keeping the dual iterate.
    pub fn warm_start(&mut self, z: &[f64]) -> Result<()> {
        if z.len() != self.qp.num_vars {
            return Err(Error::Dimension("warm start has the wrong length".into()));
        }
        let y = self.red.restrict(z);
        for j in 0..self.n {
            self.x[j] = y[j] / self.d[j];
        }
        let mut v = self.h.clone();
        self.g.gemv(1.0, &self.x, &mut v);
        for (vi, yi) in v.iter_mut().zip(&self.y) {
            *vi += yi / self.rho;
        }
        self.s = self.project(&v);
        self.x_on_affine = false;
        Ok(())
    }

    /// Current primal point in original coordinates.
    pub fn z(&self) -> Vec<f64> {
        let y: Vec<f64> = self.x.iter().zip(&self.d).map(|(x, d)| x * d).collect();
        self.red.lift(&y)
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        if self.m_psd == 0 {
            return Vec::new();
        }
        let m = smat(v, self.size);
        let eig = m.clone().symmetric_eigen();
        let lam = &eig.eigenvalues;
        let neg = lam.iter().filter(|&&l| l < 0.0).count();
        let out = if neg == 0 {
            m
        } else if 2 * neg <= lam.len() {
            let mut out = m;
            for k in 0..lam.len() {
                if lam[k] < 0.0 {
                    let col = eig.eigenvectors.column(k);
                    out.ger(-lam[k], &col, &col, 1.0);
                }
            }
            out
        } else {
            let keep: Vec<usize> = (0..lam.len()).filter(|&k| lam[k] > 0.0).collect();
            let mut vs = nalgebra::DMatrix::zeros(self.size, keep.len());
            for (c, &k) in keep.iter().enumerate() {
                vs.column_mut(c).copy_from(&(eig.eigenvectors.column(k) * lam[k].sqrt()));
            }
            &vs * vs.transpose()
        };
        let mut s = vec![0.0; self.m_psd];
        svec(&out, &mut s);
        s
    }

    fn refactor(&mut self) -> Result<()> {
        let rho = self.rho;
        let vals: Vec<f64> = self.kkt_base.iter().zip(&self.kkt_gtg).map(|(b, g)| b + rho * g).collect();
        self.factor.factor(&vals, self.n).map_err(solver_err)
    }

    /// `K0 [x; nu]` with the unregularized KKT matrix.
    fn kkt_apply(&self, sol: &[f64], out: &mut [f64]) {
        let n = self.n;
        let (x, nu) = sol.split_at(n);
        out.iter_mut().for_each(|v| *v = 0.0);
        let (ox, onu) = out.split_at_mut(n);
        self.p.gemv(1.0, x, ox);
        for j in 0..n {
            ox[j] += self.settings.sigma * x[j];
        }
        let gx = self.g.mul_vec(x);
        self.g.gemv_t(self.rho, &gx, ox);
        self.a.gemv_t(1.0, nu, ox);
        self.a.gemv(1.0, x, onu);
    }

    fn kkt_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut sol = rhs.to_vec();
        self.factor.solve(&mut sol);
        let scale = 1.0 + inf_norm(rhs);
        let mut r = vec![0.0; rhs.len()];
        for _ in 0..self.settings.refine_steps {
            self.kkt_apply(&sol, &mut r);
            for (ri, bi) in r.iter_mut().zip(rhs) {
                *ri = bi - *ri;
            }
            if inf_norm(&r) <= 1e-13 * scale {
                break;
            }
            self.factor.solve(&mut r);
            for (si, ri) in sol.iter_mut().zip(&r) {
                *si += ri;
            }
        }
        sol
    }

    /// Runs iterations from the current state.
    pub fn solve(&mut self) -> (Vec<f64>, SolveReport) {
        let start = Instant::now();
        let st = self.settings.clone();
        let (n, m_eq, m_psd) = (self.n, self.m_eq, self.m_psd);
        if let Some(fam) = self.presolve_failure.clone() {
            let z = self.z();
            let mut rep = self.report(&z, Status::InfeasibleSuspect, 0, start, Vec::new());
            rep.diagnosis = Some(format!("{fam}: equality row with no free variables has nonzero right-hand side"));
            return (z, rep);
        }
        let mut trace = Vec::new();
        let mut rhs = vec![0.0; n + m_eq];
        let mut status = Status::MaxIter;
        let mut iter = 0;
        let mut y_mark = self.y.clone();
        let mut nu_mark = self.nu.clone();
        let mut certificate = false;
        while iter < st.max_iter {
            iter += 1;
            // x-step
            let mut t: Vec<f64> = (0..m_psd).map(|i| self.rho * (self.h[i] - self.s[i]) + self.y[i]).collect();
            if m_psd == 0 {
                t.clear();
            }
            for j in 0..n {
                rhs[j] = st.sigma * self.x[j] - self.q[j];
            }
            self.g.gemv_t(-1.0, &t, &mut rhs[..n]);
            rhs[n..].copy_from_slice(&self.b);
            let sol = self.kkt_solve(&rhs);
            let (xt, nu) = sol.split_at(n);
            let mut vt = self.h.clone();
            self.g.gemv(1.0, xt, &mut vt);
            let x_prev = std::mem::take(&mut self.x);
            let ax = if self.x_on_affine { st.alpha } else { 1.0 };
            self.x_on_affine = true;
            self.x = (0..n).map(|j| ax * xt[j] + (1.0 - ax) * x_prev[j]).collect();
            let vr: Vec<f64> = (0..m_psd).map(|i| st.alpha * vt[i] + (1.0 - st.alpha) * self.s[i]).collect();
            let w: Vec<f64> = (0..m_psd).map(|i| vr[i] + self.y[i] / self.rho).collect();
            let s_new = self.project(&w);
            let y_prev = self.y.clone();
            for i in 0..m_psd {
                self.y[i] += self.rho * (vr[i] - s_new[i]);
            }
            if st.record_trace {
                let dx: f64 = (0..n).map(|j| (self.x[j] - x_prev[j]).powi(2)).sum();
                let ds: f64 = (0..m_psd).map(|i| (s_new[i] - self.s[i]).powi(2)).sum();
                let dy: f64 = (0..m_psd).map(|i| (self.y[i] - y_prev[i]).powi(2)).sum();
                trace.push((st.sigma * dx + self.rho * ds + dy / self.rho).sqrt());
            }
            self.s = s_new;
            self.nu = nu.to_vec();

            let check = iter % st.check_interval == 0 || iter == st.max_iter;
            let adapt = st.adaptive_rho && iter % st.adapt_interval == 0;
            if !(check || adapt) {
                continue;
            }
            let res = self.residuals();
            if check && res.converged(&st) && self.psd_ok(&res, &st) {
                status = Status::Optimal;
                break;
            }
            if iter % st.adapt_interval == 0 {
                if self.infeasibility_certificate(&y_mark, &nu_mark) {
                    certificate = true;
                    status = Status::InfeasibleSuspect;
                    break;
                }
                y_mark = self.y.clone();
                nu_mark = self.nu.clone();
            }
            if adapt {
                let ratio = (res.prim_scaled / res.prim_norm_scaled.max(1e-30))
                    / (res.dual_scaled / res.dual_norm_scaled.max(1e-30)).max(1e-30);
                let new_rho = (self.rho * ratio.sqrt()).clamp(RHO_MIN, RHO_MAX);
                if res.prim_scaled > 0.0 && res.dual_scaled > 0.0 && (new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho) {
                    self.rho = new_rho;
                    if self.refactor().is_err() {
                        status = Status::InfeasibleSuspect;
                        break;
                    }
                }
            }
        }
        let z = self.z();
        let mut rep = self.report(&z, status, iter, start, trace);
        if status == Status::MaxIter {
            let res = self.residuals();
            // primal stuck while the dual side has settled looks like infeasibility
            if !res.primal_ok(&st) && res.dual_ok(&st) {
                rep.status = Status::InfeasibleSuspect;
            }
        }
        if rep.status != Status::Optimal {
            rep.diagnosis = Some(self.diagnose(&z, certificate));
        }
        (z, rep)
    }

    fn psd_ok(&self, res: &Residuals, st: &Settings) -> bool {
        if self.m_psd == 0 {
            return true;
        }
        let tol = res.prim_tol(st);
        if res.prim_two <= tol {
            return true;
        }
        let z = self.z();
        self.qp.psd_residual(&z) <= tol
    }

    fn residuals(&self) -> Residuals {
        let (n, m_psd) = (self.n, self.m_psd);
        let ec = 1.0 / self.e_psd;
        let mut gx = vec![0.0; m_psd];
        self.g.gemv(1.0, &self.x, &mut gx);
        let rp: Vec<f64> = (0..m_psd).map(|i| gx[i] + self.h[i] - self.s[i]).collect();
        let prim_scaled = inf_norm(&rp);
        let prim = prim_scaled * ec;
        let prim_two = rp.iter().map(|v| v * v).sum::<f64>().sqrt() * ec;
        let prim_norm = inf_norm(&gx).max(inf_norm(&self.h)).max(inf_norm(&self.s)) * ec;
        let prim_norm_scaled = inf_norm(&gx).max(inf_norm(&self.s));

        let px = self.p.mul_vec(&self.x);
        let aty = self.a.tr_mul_vec(&self.nu);
        let gty = self.g.tr_mul_vec(&self.y);
        let unscale = |v: &[f64]| -> f64 { (0..n).fold(0.0f64, |m, j| m.max((v[j] / self.d[j]).abs())) / self.c };
        let rd: Vec<f64> = (0..n).map(|j| px[j] + self.q[j] + aty[j] + gty[j]).collect();
        let dual_scaled = inf_norm(&rd);
        let dual = unscale(&rd);
        let dual_norm = unscale(&px).max(unscale(&self.q)).max(unscale(&aty)).max(unscale(&gty));
        let dual_norm_scaled = inf_norm(&px).max(inf_norm(&self.q)).max(inf_norm(&aty)).max(inf_norm(&gty));

        let mut ax = vec![0.0; self.m_eq];
        self.a.gemv(1.0, &self.x, &mut ax);
        let eq = (0..self.m_eq).fold(0.0f64, |m, i| m.max(((ax[i] - self.b[i]) / self.e[i]).abs()));
        let eq_norm = (0..self.m_eq).fold(0.0f64, |m, i| m.max((self.b[i] / self.e[i]).abs()));
        Residuals {
            prim,
            prim_two,
            prim_norm,
            prim_scaled,
            prim_norm_scaled,
            dual,
            dual_norm,
            dual_scaled,
            dual_norm_scaled,
            eq,
            eq_norm,
        }
    }

    /// Farkas-type test on the dual increments since the last mark.
    fn infeasibility_certificate(&self, y_mark: &[f64], nu_mark: &[f64]) -> bool {
        let dy: Vec<f64> = self.y.iter().zip(y_mark).map(|(a, b)| a - b).collect();
        let dnu: Vec<f64> = self.nu.iter().zip(nu_mark).map(|(a, b)| a - b).collect();
        let mag = inf_norm(&dy).max(inf_norm(&dnu));
        if mag < 1e-6 * (1.0 + inf_norm(&self.y).max(inf_norm(&self.nu))) || mag == 0.0 {
            return false;
        }
        let mut at = self.g.tr_mul_vec(&dy);
        self.a.gemv_t(1.0, &dnu, &mut at);
        let lhs = (0..self.n).fold(0.0f64, |m, j| m.max((at[j] / self.d[j]).abs()));
        let gap = dot(&dy, &self.h) - dot(&dnu, &self.b);
        let eps = 1e-6;
        if lhs > eps * mag || gap <= eps * mag {
            return false;
        }
        // dy must lie in the negative cone
        if self.m_psd > 0 {
            let lmax = smat(&dy, self.size).symmetric_eigenvalues().max();
            if lmax > eps * mag {
                return false;
            }
        }
        true
    }

    fn diagnose(&self, z: &[f64], certificate: bool) -> String {
        let tol = self.settings.eps_abs + self.settings.eps_rel * inf_norm(&self.qp.b_eq);
        let mut worst: Option<(String, f64)> = None;
        for (name, r) in self.qp.family_residuals(z) {
            if r > tol && worst.as_ref().is_none_or(|w| r > w.1) {
                worst = Some((name, r));
            }
        }
        let psd = self.qp.psd_residual(z);
        let psd_tol = self.settings.eps_abs + self.settings.eps_rel * inf_norm(&self.h) / self.e_psd;
        if psd > psd_tol && worst.as_ref().is_none_or(|w| psd >= w.1) {
            worst = Some((self.qp.psd_name.clone(), psd));
        }
        let prefix = if certificate { "infeasibility certificate found; " } else { "" };
        match worst {
            Some((name, r)) => format!("{prefix}{name} violated by {r:.3e}"),
            None if certificate => format!("{prefix}{} or equalities inconsistent", self.qp.psd_name),
            None => "iteration limit reached before the dual residual met tolerance".into(),
        }
    }

    fn report(&self, z: &[f64], status: Status, iterations: usize, start: Instant, trace: Vec<f64>) -> SolveReport {
        let primal_residual = self.qp.eq_residual(z);
        let psd_residual = self.qp.psd_residual(z);
        let res = self.residuals();
        let tolerance = res.prim_tol(&self.settings).max(res.eq_tol(&self.settings));
        SolveReport {
            status,
            objective: self.qp.objective(z),
            primal_residual,
            psd_residual,
            tolerance,
            iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            rho: self.rho,
            diagnosis: None,
            fixed_point_trace: trace,
        }
    }

    pub fn num_kept_rows(&self) -> usize {
        self.kept_rows.len()
    }
}

struct Residuals {
    prim: f64,
    prim_two: f64,
    prim_norm: f64,
    prim_scaled: f64,
    prim_norm_scaled: f64,
    dual: f64,
    dual_norm: f64,
    dual_scaled: f64,
    dual_norm_scaled: f64,
    eq: f64,
    eq_norm: f64,
}

impl Residuals {
    fn prim_tol(&self, st: &Settings) -> f64 {
        st.eps_abs + st.eps_rel * self.prim_norm
    }

    fn eq_tol(&self, st: &Settings) -> f64 {
        st.eps_abs + st.eps_rel * self.eq_norm
    }

    fn primal_ok(&self, st: &Settings) -> bool {
        self.prim <= self.prim_tol(st) && self.eq <= self.eq_tol(st)
    }

    fn dual_ok(&self, st: &Settings) -> bool {
        self.dual <= st.eps_abs + st.eps_rel * self.dual_norm
    }

    fn converged(&self, st: &Settings) -> bool {
        self.primal_ok(st) && self.dual_ok(st)
    }
}

fn family_of(qp: &ConicQp, row: usize) -> String {
    qp.families
        .iter()
        .find(|f| f.rows.contains(&row))
        .map_or_else(|| "equality".to_string(), |f| f.name.clone())
}

fn solver_err(e: super::ldl::LdlError) -> Error {
    Error::Solver {
        status: "factorization".into(),
        detail: e.to_string(),
    }
}

/// Upper triangle of `G'G` as triplets (duplicates summed later).
fn upper_gram(g: &CscMatrix) -> Vec<(usize, usize, f64)> {
    let gt = g.transpose();
    let mut acc: std::collections::HashMap<(usize, usize), f64> = std::collections::HashMap::new();
    for r in 0..gt.ncols {
        let span = gt.colptr[r]..gt.colptr[r + 1];
        for p in span.clone() {
            for q in span.clone() {
                let (i, j) = (gt.rowind[p], gt.rowind[q]);
                if i <= j {
                    *acc.entry((i, j)).or_insert(0.0) += gt.values[p] * gt.values[q];
                }
            }
        }
    }
    let mut out: Vec<_> = acc.into_iter().map(|((i, j), v)| (i, j, v)).collect();
    out.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    out
}

/// Values of `trip` laid out on `pattern`.
fn scatter(pattern: &CscMatrix, trip: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut vals = vec![0.0; pattern.nnz()];
    for &(i, j, v) in trip {
        let span = pattern.colptr[j]..pattern.colptr[j + 1];
        let k = pattern.rowind[span.clone()].binary_search(&i).expect("entry in pattern");
        vals[span.start + k] += v;
    }
    vals
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{solve, PsdBlock, PsdCoeff, RowFamily};
    use nalgebra::DMatrix;

    fn qp(n: usize) -> ConicQp {
        ConicQp {
            num_vars: n,
            p: CscMatrix::identity(n),
            q: vec![0.0; n],
            c: 0.0,
            a_eq: CscMatrix::zeros(0, n),
            b_eq: Vec::new(),
            families: Vec::new(),
            psd: None,
            psd_name: "lmi".into(),
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let mut p = qp(3);
        p.q = vec![1.0, -2.0, 0.5];
        let (z, rep) = solve(&p, &Settings::default(), None).unwrap();
        assert_eq!(rep.status, Status::Optimal);
        for (zi, qi) in z.iter().zip(&p.q) {
            assert!((zi + qi).abs() < 1e-6);
        }
    }

    #[test]
    fn equality_and_matrix_constraint() {
        // min ||z||^2 s.t. z0 = 1, diag(z0) PSD  (P = 2I)
        let mut p = qp(2);
        p.p = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]);
        p.a_eq = CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0)]);
        p.b_eq = vec![1.0];
        p.families = vec![RowFamily { name: "pin".into(), rows: 0..1, eliminate: false }];
        p.psd = Some(PsdBlock {
            size: 1,
            offset: DMatrix::zeros(1, 1),
            coeffs: vec![PsdCoeff { var: 0, row: 0, col: 0, value: 1.0 }],
        });
        let (z, rep) = solve(&p, &Settings::default(), None).unwrap();
        assert_eq!(rep.status, Status::Optimal);
        assert!((z[0] - 1.0).abs() < 1e-8 && z[1].abs() < 1e-6, "{z:?} {rep:?}");
    }

    #[test]
    fn active_matrix_constraint() {
        // min (z0 - 2)^2 + (z1 - 2)^2 s.t. [[1, z0], [z0, 1]] PSD, i.e. |z0| <= 1
        let mut p = qp(2);
        p.p = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 1, 2.0)]);
        p.q = vec![-4.0, -4.0];
        p.c = 8.0;
        p.psd = Some(PsdBlock {
            size: 2,
            offset: DMatrix::identity(2, 2),
            coeffs: vec![PsdCoeff { var: 0, row: 1, col: 0, value: 1.0 }],
        });
        let (z, rep) = solve(&p, &Settings::default(), None).unwrap();
        assert_eq!(rep.status, Status::Optimal);
        assert!((z[0] - 1.0).abs() < 1e-5 && (z[1] - 2.0).abs() < 1e-6, "{z:?}");
        assert!((rep.objective - 1.0).abs() < 1e-5);
        assert!(rep.psd_residual <= rep.tolerance);
    }

    #[test]
    fn inconsistent_fixed_row_is_flagged() {
        let mut p = qp(1);
        p.a_eq = CscMatrix::from_triplets(1, 1, &[(0, 0, 0.0)]);
        p.b_eq = vec![1.0];
        p.families = vec![RowFamily { name: "locality".into(), rows: 0..1, eliminate: false }];
        let (_, rep) = solve(&p, &Settings::default(), None).unwrap();
        assert_eq!(rep.status, Status::InfeasibleSuspect);
        assert!(rep.diagnosis.unwrap().contains("locality"));
    }

    #[test]
    fn infeasible_matrix_constraint_is_flagged() {
        // z0 = 2 but [[1, z0], [z0, 1]] PSD needs |z0| <= 1
        let mut p = qp(1);
        p.a_eq = CscMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]);
        p.b_eq = vec![2.0];
        p.families = vec![RowFamily { name: "pin".into(), rows: 0..1, eliminate: false }];
        p.psd = Some(PsdBlock {
            size: 2,
            offset: DMatrix::identity(2, 2),
            coeffs: vec![PsdCoeff { var: 0, row: 1, col: 0, value: 1.0 }],
        });
        let st = Settings { max_iter: 5000, ..Settings::default() };
        let (_, rep) = solve(&p, &st, None).unwrap();
        assert_eq!(rep.status, Status::InfeasibleSuspect, "{rep:?}");
        assert!(rep.diagnosis.unwrap().contains("lmi"));
    }
}
