//! Presolve that solves out equality rows which only touch small groups of
//! variables. Each group is reduced with a column-pivoted QR of its rows, so
//! redundant rows disappear and the remaining variables are coordinates in
//! an orthonormal basis of the group's null space: `z = z0 + N y`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use petgraph::unionfind::UnionFind;

use super::sparse::{inf_norm, CscMatrix};
use super::{ConicQp, PsdBlock, PsdCoeff, RowFamily};

/// Groups with more variables than this keep their rows as equalities.
pub const MAX_GROUP_VARS: usize = 3000;
/// Relative column-norm threshold for the rank decision.
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Reduction {
    pub z0: Vec<f64>,
    /// `n x n_y` with orthonormal columns.
    pub basis: CscMatrix,
    pub basis_t: CscMatrix,
    /// Equality rows of the original program still imposed explicitly.
    pub kept_rows: Vec<usize>,
    /// Family of a row found inconsistent while reducing.
    pub failure: Option<String>,
}

impl Reduction {
    pub fn num_reduced(&self) -> usize {
        self.basis.ncols
    }

    /// `z0 + N y`.
    pub fn lift(&self, y: &[f64]) -> Vec<f64> {
        let mut z = self.z0.clone();
        self.basis.gemv(1.0, y, &mut z);
        z
    }

    /// `N^T (z - z0)`, exact for points of the affine set.
    pub fn restrict(&self, z: &[f64]) -> Vec<f64> {
        let dz: Vec<f64> = z.iter().zip(&self.z0).map(|(a, b)| a - b).collect();
        self.basis_t.mul_vec(&dz)
    }

    /// Reduced linear term `N^T (P z0 + q)`.
    pub fn reduced_q(&self, pz0: &[f64], q: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = pz0.iter().zip(q).map(|(a, b)| a + b).collect();
        self.basis_t.mul_vec(&v)
    }

    /// The program in the reduced coordinates.
    pub fn apply(&self, qp: &ConicQp) -> ConicQp {
        let n_y = self.num_reduced();
        let pz0 = qp.p.mul_vec(&self.z0);
        let p = self.basis_t.matmul(&qp.p.matmul(&self.basis));
        let q = self.reduced_q(&pz0, &qp.q);
        let c = 0.5 * super::sparse::dot(&self.z0, &pz0) + super::sparse::dot(&qp.q, &self.z0) + qp.c;

        let a_k = qp.a_eq.select_rows(&self.kept_rows);
        let az0 = a_k.mul_vec(&self.z0);
        let b_eq: Vec<f64> = self.kept_rows.iter().zip(&az0).map(|(&r, v)| qp.b_eq[r] - v).collect();
        let a_eq = a_k.matmul(&self.basis);
        let mut families = Vec::new();
        for f in &qp.families {
            let rows: Vec<usize> = (0..self.kept_rows.len()).filter(|&k| f.rows.contains(&self.kept_rows[k])).collect();
            if let (Some(&lo), Some(&hi)) = (rows.first(), rows.last()) {
                families.push(RowFamily {
                    name: f.name.clone(),
                    rows: lo..hi + 1,
                    eliminate: false,
                });
            }
        }

        let psd = qp.psd.as_ref().map(|blk| {
            let mut offset = blk.offset.clone();
            let mut acc: HashMap<(usize, usize, usize), f64> = HashMap::new();
            for cf in &blk.coeffs {
                let v0 = cf.value * self.z0[cf.var];
                if v0 != 0.0 {
                    offset[(cf.row, cf.col)] += v0;
                    if cf.row != cf.col {
                        offset[(cf.col, cf.row)] += v0;
                    }
                }
                let span = self.basis_t.colptr[cf.var]..self.basis_t.colptr[cf.var + 1];
                for p in span {
                    let k = self.basis_t.rowind[p];
                    *acc.entry((k, cf.row, cf.col)).or_insert(0.0) += cf.value * self.basis_t.values[p];
                }
            }
            let mut coeffs: Vec<PsdCoeff> = acc
                .into_iter()
                .filter(|(_, v)| *v != 0.0)
                .map(|((var, row, col), value)| PsdCoeff { var, row, col, value })
                .collect();
            coeffs.sort_unstable_by_key(|c| (c.var, c.col, c.row));
            PsdBlock {
                size: blk.size,
                offset,
                coeffs,
            }
        });
        ConicQp {
            num_vars: n_y,
            p,
            q,
            c,
            a_eq,
            b_eq,
            families,
            psd,
            psd_name: qp.psd_name.clone(),
        }
    }
}

fn family_of(qp: &ConicQp, row: usize) -> String {
    qp.families
        .iter()
        .find(|f| f.rows.contains(&row))
        .map_or_else(|| "equality".to_string(), |f| f.name.clone())
}

struct GroupResult {
    z0: Vec<f64>,
    null: DMatrix<f64>,
}

/// Householder QR with column pivoting of `m` (`vars x rows`), i.e. of the
/// transposed constraint block. Solves `m^T z = b` and returns a particular
/// solution with the null space of `m^T`, or the worst residual if the rows
/// are inconsistent.
fn reduce_group(mut m: DMatrix<f64>, b: &[f64], tol: f64) -> Result<GroupResult, (usize, f64)> {
    let (nv, nr) = m.shape();
    let orig = m.clone();
    let mut perm: Vec<usize> = (0..nr).collect();
    let mut norms: Vec<f64> = (0..nr).map(|j| m.column(j).norm_squared()).collect();
    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max).sqrt();
    let thresh = RANK_TOL * max_norm.max(f64::MIN_POSITIVE);
    let mut betas = Vec::new();
    let mut rank = 0;
    for k in 0..nr.min(nv) {
        let (jmax, &best) = norms[k..]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite norms"))
            .map(|(j, v)| (j + k, v))
            .expect("nonempty range");
        if best.sqrt() <= thresh {
            break;
        }
        m.swap_columns(k, jmax);
        perm.swap(k, jmax);
        norms.swap(k, jmax);
        // reflector zeroing m[k+1.., k]
        let x: DVector<f64> = m.column(k).rows(k, nv - k).into_owned();
        let alpha = x.norm();
        let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x;
        v[0] += sign * alpha;
        let vnorm2 = v.norm_squared();
        let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        {
            let mut sub = m.view_mut((k, k), (nv - k, nr - k));
            let w = sub.tr_mul(&v) * beta;
            sub.ger(-1.0, &v, &w, 1.0);
        }
        // keep v below the diagonal, scaled so v[0] = 1
        let v0 = v[0];
        for i in (k + 1)..nv {
            m[(i, k)] = v[i - k] / v0;
        }
        betas.push(beta * v0 * v0);
        for j in (k + 1)..nr {
            norms[j] = m.column(j).rows(k + 1, nv - k - 1).norm_squared();
        }
        rank += 1;
    }
    // Q = H_0 H_1 ... H_{rank-1}, H_k = I - beta_k u_k u_k^T, u_k = [0; 1; m[k+1.., k]]
    let apply_q = |target: &mut DMatrix<f64>| {
        for k in (0..rank).rev() {
            let mut u = DVector::zeros(nv - k);
            u[0] = 1.0;
            for i in (k + 1)..nv {
                u[i - k] = m[(i, k)];
            }
            let mut sub = target.rows_mut(k, nv - k);
            let w = sub.tr_mul(&u) * betas[k];
            sub.ger(-1.0, &u, &w, 1.0);
        }
    };
    // R^T w = P^T b on the first `rank` permuted rows; R(i, j) = m[(i, j)] for i <= j
    let mut w = vec![0.0; rank];
    for i in 0..rank {
        let mut acc = b[perm[i]];
        for (j, wj) in w.iter().enumerate().take(i) {
            acc -= m[(j, i)] * wj;
        }
        w[i] = acc / m[(i, i)];
    }
    let mut z = DMatrix::zeros(nv, 1);
    for i in 0..rank {
        z[(i, 0)] = w[i];
    }
    apply_q(&mut z);
    let mut null = DMatrix::zeros(nv, nv - rank);
    for c in 0..(nv - rank) {
        null[(rank + c, c)] = 1.0;
    }
    apply_q(&mut null);
    let z0: Vec<f64> = z.column(0).iter().cloned().collect();
    let resid = orig.tr_mul(&z.column(0));
    let mut worst = (0usize, 0.0f64);
    for (r, (&lhs, &rhs)) in resid.iter().zip(b).enumerate() {
        let e = (lhs - rhs).abs();
        if e > worst.1 {
            worst = (r, e);
        }
    }
    if worst.1 > tol {
        return Err(worst);
    }
    Ok(GroupResult { z0, null })
}

/// Splits the equality rows of eliminable families into independent groups
/// and solves each one out.
pub fn reduce(qp: &ConicQp, tol: f64) -> Reduction {
    let n = qp.num_vars;
    let at = qp.a_eq.transpose();
    let row_vars = |r: usize| (at.colptr[r]..at.colptr[r + 1]).filter(|&p| at.values[p] != 0.0).map(|p| (at.rowind[p], at.values[p]));
    let mut elim_rows = Vec::new();
    let mut kept_rows = Vec::new();
    let mut failure = None;
    for r in 0..qp.a_eq.nrows {
        let eliminable = qp.families.iter().any(|f| f.eliminate && f.rows.contains(&r));
        if !eliminable {
            kept_rows.push(r);
        } else if row_vars(r).next().is_none() {
            if qp.b_eq[r].abs() > tol && failure.is_none() {
                failure = Some(family_of(qp, r));
            }
        } else {
            elim_rows.push(r);
        }
    }
    let mut uf = UnionFind::<usize>::new(n);
    for &r in &elim_rows {
        let mut it = row_vars(r);
        if let Some((first, _)) = it.next() {
            for (v, _) in it {
                uf.union(first, v);
            }
        }
    }
    let mut in_rows = vec![false; n];
    let mut group_rows: HashMap<usize, Vec<usize>> = HashMap::new();
    for &r in &elim_rows {
        let (first, _) = row_vars(r).next().expect("nonempty row");
        group_rows.entry(uf.find(first)).or_default().push(r);
        for (v, _) in row_vars(r) {
            in_rows[v] = true;
        }
    }
    let mut group_vars: HashMap<usize, Vec<usize>> = HashMap::new();
    for v in 0..n {
        if in_rows[v] {
            group_vars.entry(uf.find(v)).or_default().push(v);
        }
    }

    let mut z0 = vec![0.0; n];
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut next_col = 0;
    let mut done: HashMap<usize, ()> = HashMap::new();
    for v in 0..n {
        if !in_rows[v] {
            trip.push((v, next_col, 1.0));
            next_col += 1;
            continue;
        }
        let root = uf.find(v);
        if done.insert(root, ()).is_some() {
            continue;
        }
        let vars = &group_vars[&root];
        let rows = &group_rows[&root];
        let as_kept = |trip: &mut Vec<(usize, usize, f64)>, next_col: &mut usize, kept_rows: &mut Vec<usize>| {
            for &gv in vars {
                trip.push((gv, *next_col, 1.0));
                *next_col += 1;
            }
            kept_rows.extend(rows.iter().copied());
        };
        if vars.len() > MAX_GROUP_VARS {
            as_kept(&mut trip, &mut next_col, &mut kept_rows);
            continue;
        }
        let local: HashMap<usize, usize> = vars.iter().enumerate().map(|(k, &gv)| (gv, k)).collect();
        let mut m = DMatrix::zeros(vars.len(), rows.len());
        let mut b = Vec::with_capacity(rows.len());
        for (j, &r) in rows.iter().enumerate() {
            for (gv, val) in row_vars(r) {
                m[(local[&gv], j)] = val;
            }
            b.push(qp.b_eq[r]);
        }
        let gtol = tol.max(1e-12 * (1.0 + inf_norm(&b)));
        match reduce_group(m, &b, gtol) {
            Ok(res) => {
                for (k, &gv) in vars.iter().enumerate() {
                    z0[gv] = res.z0[k];
                }
                for c in 0..res.null.ncols() {
                    for (k, &gv) in vars.iter().enumerate() {
                        let val = res.null[(k, c)];
                        if val != 0.0 {
                            trip.push((gv, next_col, val));
                        }
                    }
                    next_col += 1;
                }
            }
            Err((row, _)) => {
                if failure.is_none() {
                    failure = Some(family_of(qp, rows[row]));
                }
                as_kept(&mut trip, &mut next_col, &mut kept_rows);
            }
        }
    }
    kept_rows.sort_unstable();
    let basis = CscMatrix::from_triplets(n, next_col, &trip);
    let basis_t = basis.transpose();
    Reduction {
        z0,
        basis,
        basis_t,
        kept_rows,
        failure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redundant_rows_are_dropped() {
        // x0 + x1 = 1 twice, x1 - x2 = 0; three vars, rank 2
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, -1.0]);
        let res = reduce_group(m.clone(), &[1.0, 1.0, 0.0], 1e-12).unwrap();
        assert_eq!(res.null.ncols(), 1);
        let z = DVector::from_vec(res.z0.clone());
        let r = m.tr_mul(&z) - DVector::from_vec(vec![1.0, 1.0, 0.0]);
        assert!(r.amax() < 1e-14);
        assert!((m.tr_mul(&res.null)).amax() < 1e-14);
        assert!((res.null.tr_mul(&res.null) - DMatrix::identity(1, 1)).amax() < 1e-14);
    }

    #[test]
    fn inconsistent_rows_are_reported() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(reduce_group(m, &[1.0, 2.0], 1e-9).is_err());
    }
}
