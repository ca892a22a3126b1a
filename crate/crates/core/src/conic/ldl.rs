//! Sparse `LDL^T` for quasi-definite matrices: a greedy minimum-degree
//! ordering, an elimination-tree symbolic pass and an up-looking numeric
//! factorization. Quasi-definite matrices factor stably under any symmetric
//! permutation, so no pivoting is needed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::sparse::CscMatrix;

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LdlError {
    #[error("matrix is not square")]
    NotSquare,
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("pivot signs do not match the expected inertia ({positive} positive, expected {expected})")]
    Inertia { positive: usize, expected: usize },
}

/// Greedy minimum-degree ordering on the symmetric pattern of `upper`.
/// Returns `perm` with `perm[new] = old`.
pub fn minimum_degree(upper: &CscMatrix) -> Vec<usize> {
    let n = upper.ncols;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in upper.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let mut eliminated = vec![false; n];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut perm = Vec::with_capacity(n);
    let mut mark = vec![NONE; n];
    let mut merged = Vec::new();
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        perm.push(v);
        let nbrs = std::mem::take(&mut adj[v]);
        for &u in &nbrs {
            // adj[u] <- (adj[u] ∪ nbrs) \ {u, v}
            merged.clear();
            mark[u] = v;
            mark[v] = v;
            for &w in adj[u].iter().chain(&nbrs) {
                if mark[w] != v {
                    mark[w] = v;
                    merged.push(w);
                }
            }
            merged.sort_unstable();
            // reset marks touched for this neighbor so the next one starts clean
            for &w in &merged {
                mark[w] = NONE;
            }
            mark[u] = NONE;
            mark[v] = NONE;
            std::mem::swap(&mut adj[u], &mut merged);
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    perm
}

/// Symbolic and numeric factorization state, reusable across value updates
/// that keep the sparsity pattern.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    /// Position of each input upper entry inside the permuted pattern.
    map: Vec<usize>,
    ap: Vec<usize>,
    ai: Vec<usize>,
    ax: Vec<f64>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
}

impl LdlFactor {
    /// Orders and symbolically analyzes an upper-triangular pattern. Every
    /// diagonal entry must be present.
    pub fn analyze(upper: &CscMatrix) -> Result<Self, LdlError> {
        if upper.nrows != upper.ncols {
            return Err(LdlError::NotSquare);
        }
        let n = upper.ncols;
        let perm = minimum_degree(upper);
        let mut pinv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }
        // Permute, keeping track of where each input entry lands.
        let mut count = vec![0usize; n + 1];
        let mut target = Vec::with_capacity(upper.nnz());
        for (i, j, _) in upper.triplets() {
            let (a, b) = (pinv[i], pinv[j]);
            let (r, c) = if a <= b { (a, b) } else { (b, a) };
            count[c + 1] += 1;
            target.push((r, c));
        }
        for c in 0..n {
            count[c + 1] += count[c];
        }
        let ap = count.clone();
        let mut next = count;
        let mut ai = vec![0usize; target.len()];
        let mut map = vec![0usize; target.len()];
        for (e, &(r, c)) in target.iter().enumerate() {
            ai[next[c]] = r;
            map[e] = next[c];
            next[c] += 1;
        }
        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &i0 in &ai[ap[j]..ap[j + 1]] {
                let mut i = i0;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        Ok(Self {
            n,
            perm,
            map,
            ap,
            ax: vec![0.0; ai.len()],
            ai,
            etree,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
        })
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization with values aligned to the analyzed upper
    /// pattern. `positive` is the expected number of positive pivots.
    pub fn factor(&mut self, values: &[f64], positive: usize) -> Result<(), LdlError> {
        let n = self.n;
        self.ax.iter_mut().for_each(|v| *v = 0.0);
        for (e, &v) in values.iter().enumerate() {
            self.ax[self.map[e]] += v;
        }
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();
        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    self.d[k] += self.ax[p];
                    continue;
                }
                y_vals[b] += self.ax[p];
                if !y_used[b] {
                    y_used[b] = true;
                    elim[0] = b;
                    let mut ne = 1;
                    let mut nx = self.etree[b];
                    while nx != NONE && nx < k {
                        if y_used[nx] {
                            break;
                        }
                        y_used[nx] = true;
                        elim[ne] = nx;
                        ne += 1;
                        nx = self.etree[nx];
                    }
                    while ne > 0 {
                        ne -= 1;
                        y_idx[nnz_y] = elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let tmp = next_space[c];
                let yc = y_vals[c];
                for j in self.lp[c]..tmp {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                let l = yc * self.dinv[c];
                self.lx[tmp] = l;
                self.d[k] -= yc * l;
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        if pos != positive {
            return Err(LdlError::Inertia {
                positive: pos,
                expected: positive,
            });
        }
        Ok(())
    }

    /// Solves in place in the original (unpermuted) coordinates.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for (k, &p) in self.perm.iter().enumerate() {
            b[p] = x[k];
        }
    }
}
