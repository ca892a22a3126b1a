//! Minimal compressed-sparse-column storage.

/// CSC matrix with sorted row indices inside each column and no duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowind: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowind: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowind: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Duplicates are summed; explicit zeros are kept so patterns stay stable.
    pub fn from_triplets(nrows: usize, ncols: usize, trip: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; ncols + 1];
        for &(i, j, _) in trip {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of bounds");
            count[j + 1] += 1;
        }
        for j in 0..ncols {
            count[j + 1] += count[j];
        }
        let mut next = count.clone();
        let mut rows = vec![0usize; trip.len()];
        let mut vals = vec![0.0; trip.len()];
        for &(i, j, v) in trip {
            rows[next[j]] = i;
            vals[next[j]] = v;
            next[j] += 1;
        }
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowind = Vec::with_capacity(trip.len());
        let mut values = Vec::with_capacity(trip.len());
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for j in 0..ncols {
            buf.clear();
            buf.extend((count[j]..count[j + 1]).map(|p| (rows[p], vals[p])));
            buf.sort_unstable_by_key(|e| e.0);
            for &(i, v) in &buf {
                if rowind.len() > colptr[j] && *rowind.last().unwrap() == i {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowind.push(i);
                    values.push(v);
                }
            }
            colptr[j + 1] = rowind.len();
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowind,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.colptr[j]..self.colptr[j + 1]).map(move |p| (self.rowind[p], j, self.values[p]))
        })
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    /// `y += alpha * A x`.
    pub fn gemv(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for j in 0..self.ncols {
            let xj = alpha * x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.colptr[j]..self.colptr[j + 1] {
                y[self.rowind[p]] += self.values[p] * xj;
            }
        }
    }

    /// `y += alpha * A^T x`.
    pub fn gemv_t(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.colptr[j]..self.colptr[j + 1] {
                acc += self.values[p] * x[self.rowind[p]];
            }
            y[j] += alpha * acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.gemv(1.0, x, &mut y);
        y
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.gemv_t(1.0, x, &mut y);
        y
    }

    /// `A <- diag(left) A diag(right)`.
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        for j in 0..self.ncols {
            for p in self.colptr[j]..self.colptr[j + 1] {
                self.values[p] *= left[self.rowind[p]] * right[j];
            }
        }
    }

    pub fn col_amax(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| self.values[self.colptr[j]..self.colptr[j + 1]].iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .collect()
    }

    pub fn row_amax(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.nrows];
        for (i, _, v) in self.triplets() {
            out[i] = out[i].max(v.abs());
        }
        out
    }

    /// Entries with `row <= col`.
    pub fn upper(&self) -> Self {
        let trip: Vec<_> = self.triplets().filter(|&(i, j, _)| i <= j).collect();
        Self::from_triplets(self.nrows, self.ncols, &trip)
    }

    /// Requires a structurally symmetric pattern.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let t = self.transpose();
        self.nrows == self.ncols
            && t.colptr == self.colptr
            && t.rowind == self.rowind
            && t.values.iter().zip(&self.values).all(|(a, b)| (a - b).abs() <= tol)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] += v;
        }
        m
    }

    /// `self * other`.
    pub fn matmul(&self, other: &CscMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut colptr = vec![0];
        let mut rowind = Vec::new();
        let mut values = Vec::new();
        let mut acc = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for p in other.colptr[j]..other.colptr[j + 1] {
                let (k, b) = (other.rowind[p], other.values[p]);
                for q in self.colptr[k]..self.colptr[k + 1] {
                    let i = self.rowind[q];
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = 0.0;
                        touched.push(i);
                    }
                    acc[i] += self.values[q] * b;
                }
            }
            touched.sort_unstable();
            for &i in &touched {
                if acc[i] != 0.0 {
                    rowind.push(i);
                    values.push(acc[i]);
                }
            }
            colptr.push(rowind.len());
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            colptr,
            rowind,
            values,
        }
    }

    /// Copy holding only the listed rows, renumbered in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.nrows];
        for (k, &r) in rows.iter().enumerate() {
            map[r] = k;
        }
        let trip: Vec<_> = self
            .triplets()
            .filter(|&(i, _, _)| map[i] != usize::MAX)
            .map(|(i, j, v)| (map[i], j, v))
            .collect();
        Self::from_triplets(rows.len(), self.ncols, &trip)
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let m = CscMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (0, 0, 2.0), (1, 0, 3.0)]);
        assert_eq!(m.rowind, vec![0, 1]);
        assert_eq!(m.values, vec![2.0, 4.0]);
        assert_eq!(m.colptr, vec![0, 2, 2]);
    }

    #[test]
    fn products_match_dense() {
        let m = CscMatrix::from_triplets(3, 2, &[(0, 0, 1.0), (2, 0, -2.0), (1, 1, 3.0)]);
        let d = m.to_dense();
        let x = [0.5, -1.0];
        let y = m.mul_vec(&x);
        let yd = &d * nalgebra::DVector::from_column_slice(&x);
        assert_eq!(y, yd.as_slice());
        let z = m.tr_mul_vec(&[1.0, 2.0, 3.0]);
        assert_eq!(z, vec![-5.0, 6.0]);
        assert_eq!(m.transpose().to_dense(), d.transpose());
    }
}
