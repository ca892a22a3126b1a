//! Maps the response matrices onto solver variables and builds conic
//! programs from objective pieces and constraint families.
//!
//! The decision matrix is `X = [X_x; X_u]` with `Phi = X W^T` for an
//! orthogonal `W` (identity when solving for `Phi` directly, the eigenbasis
//! of `Theta` in the transformed problem). `W` only mixes columns inside
//! connected blocks, so structural zeros of `Phi` are eliminated wherever a
//! whole row of a block is fixed and become equality rows otherwise.

use nalgebra::DMatrix;

use crate::conic::sparse::CscMatrix;
use crate::conic::{ConicQp, PsdBlock, PsdCoeff, RowFamily};
use crate::linalg::psd_sqrt;
use crate::problem::{CsProblem, TransformedProblem};
use crate::sls::ResponsePair;

pub const FAMILY_PARAMETRIZATION: &str = "parametrization";
pub const FAMILY_LOCALITY: &str = "locality";
pub const FAMILY_TERMINAL_MEAN: &str = "terminal mean";
pub const FAMILY_LMI: &str = "terminal covariance LMI";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Free(usize),
    Fixed(f64),
}

/// Affine expression `constant + sum coef * z[var]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl LinExpr {
    fn add_slot(&mut self, slot: Slot, coef: f64) {
        match slot {
            Slot::Free(i) => self.terms.push((i, coef)),
            Slot::Fixed(v) => self.constant += coef * v,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// Rows of `X`: `(T+1)n` state rows then `Tm` input rows.
    pub rows: usize,
    pub cols: usize,
    slots: Vec<Slot>,
    free: Vec<(usize, usize)>,
    w: Option<DMatrix<f64>>,
    comp_of: Vec<usize>,
    comps: Vec<Vec<usize>>,
    /// `Phi` entries that must be imposed by equality rows.
    pending: Vec<(usize, usize, f64)>,
}

/// Fixed value of `Phi(r, c)` forced by causality, the identity diagonal
/// blocks of `phi_x`, or the locality mask.
pub fn structural_value(cp: &CsProblem, r: usize, c: usize) -> Option<f64> {
    let n = cp.n();
    let sx = (cp.horizon() + 1) * n;
    if r < sx {
        if r / n == c / n {
            Some(if r == c { 1.0 } else { 0.0 })
        } else if cp.mask.support_x.get(r, c) {
            None
        } else {
            Some(0.0)
        }
    } else if cp.mask.support_u.get(r - sx, c) {
        None
    } else {
        Some(0.0)
    }
}

impl Layout {
    /// Variables are the unfixed entries of `Phi` itself.
    pub fn direct(cp: &CsProblem) -> Self {
        let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
        let rows = (t_h + 1) * n + t_h * m;
        let cols = (t_h + 1) * n;
        let mut slots = Vec::with_capacity(rows * cols);
        let mut free = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                slots.push(match structural_value(cp, r, c) {
                    Some(v) => Slot::Fixed(v),
                    None => {
                        free.push((r, c));
                        Slot::Free(free.len() - 1)
                    }
                });
            }
        }
        Self {
            n,
            m,
            horizon: t_h,
            rows,
            cols,
            slots,
            free,
            w: None,
            comp_of: (0..cols).collect(),
            comps: (0..cols).map(|c| vec![c]).collect(),
            pending: Vec::new(),
        }
    }

    /// Variables are entries of `Psi = Phi V`.
    pub fn transformed(cp: &CsProblem, tp: &TransformedProblem) -> Self {
        let (n, m, t_h) = (cp.n(), cp.m(), cp.horizon());
        let rows = (t_h + 1) * n + t_h * m;
        let cols = (t_h + 1) * n;
        let v = &tp.v;
        // column blocks that V mixes
        let mut comp_of = vec![usize::MAX; cols];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for c in 0..cols {
            if comp_of[c] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![c];
            comp_of[c] = id;
            let mut comp = Vec::new();
            while let Some(a) = stack.pop() {
                comp.push(a);
                for b in 0..cols {
                    if comp_of[b] == usize::MAX && (v[(a, b)] != 0.0 || v[(b, a)] != 0.0) {
                        comp_of[b] = id;
                        stack.push(b);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        let mut slots = vec![Slot::Fixed(0.0); rows * cols];
        let mut free = Vec::new();
        let mut pending = Vec::new();
        for r in 0..rows {
            for comp in &comps {
                let fixed: Vec<Option<f64>> = comp.iter().map(|&c| structural_value(cp, r, c)).collect();
                let n_fixed = fixed.iter().filter(|f| f.is_some()).count();
                if n_fixed == comp.len() {
                    // X(r, k) = sum_c Phi(r, c) V(c, k)
                    for &k in comp {
                        let val: f64 = comp.iter().zip(&fixed).map(|(&c, f)| f.unwrap() * v[(c, k)]).sum();
                        slots[r * cols + k] = Slot::Fixed(val);
                    }
                } else {
                    for &k in comp {
                        free.push((r, k));
                        slots[r * cols + k] = Slot::Free(free.len() - 1);
                    }
                    for (&c, f) in comp.iter().zip(&fixed) {
                        if let Some(val) = f {
                            pending.push((r, c, *val));
                        }
                    }
                }
            }
        }
        Self {
            n,
            m,
            horizon: t_h,
            rows,
            cols,
            slots,
            free,
            w: Some(v.clone()),
            comp_of,
            comps,
            pending,
        }
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn slot(&self, r: usize, k: usize) -> Slot {
        self.slots[r * self.cols + k]
    }

    pub fn is_direct(&self) -> bool {
        self.w.is_none()
    }

    pub fn state_rows(&self) -> usize {
        (self.horizon + 1) * self.n
    }

    /// `Phi(r, c)` as an affine expression in the variables.
    pub fn phi_expr(&self, r: usize, c: usize, coef: f64, out: &mut LinExpr) {
        match &self.w {
            None => out.add_slot(self.slot(r, c), coef),
            Some(w) => {
                for &k in &self.comps[self.comp_of[c]] {
                    let wk = w[(c, k)];
                    if wk != 0.0 {
                        out.add_slot(self.slot(r, k), coef * wk);
                    }
                }
            }
        }
    }

    /// `X = Phi W` for a response pair.
    pub fn x_of(&self, p: &ResponsePair) -> DMatrix<f64> {
        let stacked = p.stacked();
        match &self.w {
            None => stacked,
            Some(w) => stacked * w,
        }
    }

    /// Variable vector holding the free entries of `X` for `p`.
    pub fn z_from_pair(&self, p: &ResponsePair) -> Vec<f64> {
        let x = self.x_of(p);
        self.free.iter().map(|&(r, k)| x[(r, k)]).collect()
    }

    /// `X` from a variable vector, with fixed entries filled in.
    pub fn x_from_z(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, k| match self.slot(r, k) {
            Slot::Free(i) => z[i],
            Slot::Fixed(v) => v,
        })
    }

    pub fn pair_from_z(&self, z: &[f64]) -> ResponsePair {
        let x = self.x_from_z(z);
        let phi = match &self.w {
            None => x,
            Some(w) => x * w.transpose(),
        };
        ResponsePair::from_stacked(&phi, self.n, self.m, self.horizon).expect("layout dimensions")
    }

    /// Coefficients of `<M, Phi>` on the variables, for `M` over `Phi`.
    pub fn linear_coefficients(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let mx = self.to_x_space(m);
        self.free.iter().map(|&(r, k)| mx[(r, k)]).collect()
    }

    /// Maps a `Phi`-space matrix `M` to `M W`.
    fn to_x_space(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.w {
            None => m.clone(),
            Some(w) => m * w,
        }
    }
}

/// Which terminal covariance inequality to impose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LmiScope {
    Full,
    /// Only the diagonal block of the listed terminal rows.
    Rows(Vec<usize>),
}

/// Accumulates a conic program over a layout.
pub struct QpBuilder<'a> {
    layout: &'a Layout,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    c: f64,
    rows: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
    families: Vec<RowFamily>,
    psd: Option<PsdBlock>,
}

impl<'a> QpBuilder<'a> {
    pub fn new(layout: &'a Layout) -> Self {
        Self {
            layout,
            p: Vec::new(),
            q: vec![0.0; layout.num_free()],
            c: 0.0,
            rows: Vec::new(),
            rhs: Vec::new(),
            families: Vec::new(),
            psd: None,
        }
    }

    /// Adds `tr(F X C X^T)` restricted to the selected rows and columns of
    /// `X` (`F` over rows, `C` over columns, both symmetric).
    pub fn add_quadratic(&mut self, f: &DMatrix<f64>, cmat: &DMatrix<f64>, row_sel: Option<&[bool]>, col_sel: Option<&[bool]>) {
        let lay = self.layout;
        let keep_r = |r: usize| row_sel.is_none_or(|s| s[r]);
        let keep_c = |k: usize| col_sel.is_none_or(|s| s[k]);
        let f_nz: Vec<Vec<(usize, f64)>> = (0..lay.rows)
            .map(|r| {
                if !keep_r(r) {
                    return Vec::new();
                }
                (0..lay.rows).filter(|&b| keep_r(b) && f[(r, b)] != 0.0).map(|b| (b, f[(r, b)])).collect()
            })
            .collect();
        let c_nz: Vec<Vec<(usize, f64)>> = (0..lay.cols)
            .map(|k| {
                if !keep_c(k) {
                    return Vec::new();
                }
                (0..lay.cols).filter(|&b| keep_c(b) && cmat[(k, b)] != 0.0).map(|b| (b, cmat[(k, b)])).collect()
            })
            .collect();
        for r in 0..lay.rows {
            for &(r2, fv) in &f_nz[r] {
                for k in 0..lay.cols {
                    let sa = lay.slot(r, k);
                    if sa == Slot::Fixed(0.0) {
                        continue;
                    }
                    for &(k2, cv) in &c_nz[k] {
                        let sb = lay.slot(r2, k2);
                        let coef = fv * cv;
                        match (sa, sb) {
                            (_, Slot::Fixed(v)) if v == 0.0 => {}
                            (Slot::Free(a), Slot::Free(b)) => self.p.push((a, b, 2.0 * coef)),
                            (Slot::Free(a), Slot::Fixed(v)) => self.q[a] += coef * v,
                            (Slot::Fixed(u), Slot::Free(b)) => self.q[b] += coef * u,
                            (Slot::Fixed(u), Slot::Fixed(v)) => self.c += coef * u * v,
                        }
                    }
                }
            }
        }
    }

    /// Adds `<Omega, Phi>` for `Omega` given over `Phi`.
    pub fn add_linear_phi(&mut self, omega: &DMatrix<f64>) {
        let om = self.layout.to_x_space(omega);
        for r in 0..self.layout.rows {
            for k in 0..self.layout.cols {
                match self.layout.slot(r, k) {
                    Slot::Free(i) => self.q[i] += om[(r, k)],
                    Slot::Fixed(v) => self.c += om[(r, k)] * v,
                }
            }
        }
    }

    /// Adds `mu * || Phi - target ||_F^2`.
    pub fn add_proximal(&mut self, mu: f64, target: &DMatrix<f64>) {
        let u = self.layout.to_x_space(target);
        for r in 0..self.layout.rows {
            for k in 0..self.layout.cols {
                let t = u[(r, k)];
                match self.layout.slot(r, k) {
                    Slot::Free(i) => {
                        self.p.push((i, i, 2.0 * mu));
                        self.q[i] -= 2.0 * mu * t;
                        self.c += mu * t * t;
                    }
                    Slot::Fixed(v) => self.c += mu * (v - t) * (v - t),
                }
            }
        }
    }

    fn push_row(&mut self, e: LinExpr, rhs: f64) {
        let r = self.rhs.len();
        for (v, coef) in e.terms {
            self.rows.push((r, v, coef));
        }
        self.rhs.push(rhs - e.constant);
    }

    fn family<F: FnOnce(&mut Self)>(&mut self, name: &str, eliminate: bool, f: F) {
        let start = self.rhs.len();
        f(self);
        let end = self.rhs.len();
        if end > start {
            self.families.push(RowFamily {
                name: name.to_string(),
                rows: start..end,
                eliminate,
            });
        }
    }

    /// `Z_AB X(:, k) = W(:, k)` for each listed column of `X`.
    pub fn add_parametrization(&mut self, cp: &CsProblem, cols: &[usize]) {
        let lay = self.layout;
        let sd = &cp.dynamics;
        let sx = lay.state_rows();
        let za_nz: Vec<Vec<(usize, f64)>> =
            (0..sx).map(|a| (0..sx).filter(|&b| sd.za[(a, b)] != 0.0).map(|b| (b, sd.za[(a, b)])).collect()).collect();
        let zb_nz: Vec<Vec<(usize, f64)>> = (0..sx)
            .map(|a| (0..sd.input_len()).filter(|&b| sd.zb[(a, b)] != 0.0).map(|b| (b, sd.zb[(a, b)])).collect())
            .collect();
        self.family(FAMILY_PARAMETRIZATION, true, |bld| {
            for &k in cols {
                for a in 0..sx {
                    let mut e = LinExpr::default();
                    e.add_slot(lay.slot(a, k), 1.0);
                    for &(b, v) in &za_nz[a] {
                        e.add_slot(lay.slot(b, k), -v);
                    }
                    for &(b, v) in &zb_nz[a] {
                        e.add_slot(lay.slot(sx + b, k), -v);
                    }
                    let target = match &lay.w {
                        None => f64::from(u8::from(a == k)),
                        Some(w) => w[(a, k)],
                    };
                    bld.push_row(e, target);
                }
            }
        });
    }

    /// Structural entries of `Phi` that the layout could not eliminate.
    pub fn add_pending_structure(&mut self) {
        let lay = self.layout;
        self.family(FAMILY_LOCALITY, true, |bld| {
            for &(r, c, v) in &lay.pending {
                let mut e = LinExpr::default();
                lay.phi_expr(r, c, 1.0, &mut e);
                bld.push_row(e, v);
            }
        });
    }

    /// `P_T phi_x P_0^T mu0 = mu_f` on the listed terminal state rows.
    pub fn add_terminal_mean(&mut self, cp: &CsProblem, rows: &[usize]) {
        let lay = self.layout;
        let n = lay.n;
        let mu0 = &cp.noise.mu0;
        self.family(FAMILY_TERMINAL_MEAN, false, |bld| {
            for &r in rows {
                let mut e = LinExpr::default();
                for c in 0..n {
                    if mu0[c] != 0.0 {
                        lay.phi_expr(lay.horizon * n + r, c, mu0[c], &mut e);
                    }
                }
                bld.push_row(e, cp.terminal.mu_f[r]);
            }
        });
    }

    /// `[[Sigma_f, P_T phi_x Sigma_w^{1/2}], [., I]] PSD`, either in full or
    /// for a subset of terminal rows.
    pub fn add_lmi(&mut self, cp: &CsProblem, scope: &LmiScope) {
        let lay = self.layout;
        let n = lay.n;
        let cols = lay.cols;
        let rows: Vec<usize> = match scope {
            LmiScope::Full => (0..n).collect(),
            LmiScope::Rows(r) => r.clone(),
        };
        let nr = rows.len();
        let size = nr + cols;
        let root = psd_sqrt(&cp.noise.sigma_w());
        let root_nz: Vec<Vec<(usize, f64)>> =
            (0..cols).map(|c| (0..cols).filter(|&b| root[(c, b)] != 0.0).map(|b| (b, root[(c, b)])).collect()).collect();
        let mut offset = DMatrix::zeros(size, size);
        for (a, &ra) in rows.iter().enumerate() {
            for (b, &rb) in rows.iter().enumerate() {
                offset[(a, b)] = cp.terminal.sigma_f[(ra, rb)];
            }
        }
        for i in 0..cols {
            offset[(nr + i, nr + i)] = 1.0;
        }
        let mut coeffs = Vec::new();
        // G(a, c') = sum_c Phi(T n + r_a, c) S(c, c')
        let mut g_expr: Vec<Vec<LinExpr>> = vec![vec![LinExpr::default(); cols]; nr];
        for (a, &ra) in rows.iter().enumerate() {
            let row = lay.horizon * n + ra;
            for c in 0..cols {
                let mut phi = LinExpr::default();
                lay.phi_expr(row, c, 1.0, &mut phi);
                if phi.terms.is_empty() && phi.constant == 0.0 {
                    continue;
                }
                for &(c2, s) in &root_nz[c] {
                    let ge = &mut g_expr[a][c2];
                    ge.constant += s * phi.constant;
                    ge.terms.extend(phi.terms.iter().map(|&(v, coef)| (v, coef * s)));
                }
            }
        }
        for (a, row) in g_expr.into_iter().enumerate() {
            for (c2, e) in row.into_iter().enumerate() {
                offset[(nr + c2, a)] += e.constant;
                offset[(a, nr + c2)] += e.constant;
                let mut terms = e.terms;
                terms.sort_unstable_by_key(|t| t.0);
                let mut last: Option<usize> = None;
                for (v, coef) in terms {
                    if last == Some(v) {
                        let lc: &mut PsdCoeff = coeffs.last_mut().unwrap();
                        lc.value += coef;
                    } else {
                        coeffs.push(PsdCoeff {
                            var: v,
                            row: nr + c2,
                            col: a,
                            value: coef,
                        });
                        last = Some(v);
                    }
                }
            }
        }
        self.psd = Some(PsdBlock { size, offset, coeffs });
    }

    pub fn build(self) -> ConicQp {
        let n = self.layout.num_free();
        ConicQp {
            num_vars: n,
            p: CscMatrix::from_triplets(n, n, &self.p),
            q: self.q,
            c: self.c,
            a_eq: CscMatrix::from_triplets(self.rhs.len(), n, &self.rows),
            b_eq: self.rhs,
            families: self.families,
            psd: self.psd,
            psd_name: FAMILY_LMI.to_string(),
        }
    }
}

/// `F = blkdiag(Q, R)` for the stacked rows of `X`.
pub fn row_weights(cp: &CsProblem) -> DMatrix<f64> {
    cp.cost.f()
}

/// Column weights in `X` space: `Theta` directly, or `Lambda` after the
/// transformation.
pub fn col_weights(cp: &CsProblem, tp: Option<&TransformedProblem>) -> DMatrix<f64> {
    match tp {
        None => cp.theta(),
        Some(t) => DMatrix::from_diagonal(&t.lambda),
    }
}

pub fn selection(len: usize, idx: &[usize]) -> Vec<bool> {
    let mut s = vec![false; len];
    for &i in idx {
        s[i] = true;
    }
    s
}

/// Centralized program over a layout.
pub fn central_program(cp: &CsProblem, layout: &Layout, tp: Option<&TransformedProblem>) -> ConicQp {
    let mut b = QpBuilder::new(layout);
    b.add_quadratic(&row_weights(cp), &col_weights(cp, tp), None, None);
    let all_cols: Vec<usize> = (0..layout.cols).collect();
    b.add_parametrization(cp, &all_cols);
    b.add_pending_structure();
    let all_rows: Vec<usize> = (0..layout.n).collect();
    b.add_terminal_mean(cp, &all_rows);
    b.add_lmi(cp, &LmiScope::Full);
    b.build()
}
