//! Dense helpers shared by the synthesis and verification code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalues below this are treated as zero when forming square roots.
pub const EIG_CLAMP: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and each eigenvector's first non-negligible component made positive.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        vals[k] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).clone_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vecs.set_column(k, &col);
    }
    (vals, vecs)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric PSD square root, clamping eigenvalues below [`EIG_CLAMP`].
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig
        .eigenvalues
        .map(|l| if l > EIG_CLAMP { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Factor `L` with `L L^T = m` (eigen-based, tolerant of singular inputs).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig
        .eigenvalues
        .map(|l| if l > EIG_CLAMP { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

/// Block diagonal assembly.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Inverse of a matrix that is block lower triangular with identity diagonal
/// blocks. `row_block` is the row/column block size of the square matrix.
/// Block forward substitution; no pivoting is needed.
pub fn unit_blt_inverse(m: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let size = m.nrows();
    debug_assert_eq!(size, m.ncols());
    debug_assert_eq!(size % block.max(1), 0);
    let nb = size / block;
    let mut x = DMatrix::<f64>::zeros(size, size);
    for t in 0..nb {
        // X[t, :] = E_t - sum_{k<t} M[t,k] X[k, :]
        let mut row = DMatrix::<f64>::zeros(block, size);
        for i in 0..block {
            row[(i, t * block + i)] = 1.0;
        }
        for k in 0..t {
            let mtk = m.view((t * block, k * block), (block, block));
            if mtk.iter().all(|v| *v == 0.0) {
                continue;
            }
            let xk = x.view((k * block, 0), (block, (k + 1) * block));
            let mut target = row.view_mut((0, 0), (block, (k + 1) * block));
            target.gemm(-1.0, &mtk, &xk, 1.0);
        }
        x.view_mut((t * block, 0), (block, size)).copy_from(&row);
    }
    x
}

/// Frobenius norm of `a - b`.
pub fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
