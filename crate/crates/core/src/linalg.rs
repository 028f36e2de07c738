//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, values descending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Flips each column so that its largest-magnitude entry is positive.
pub fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Eigendecomposition of a symmetric matrix with descending values and
/// sign-normalised vectors.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> SymEigen {
    let n = m.nrows();
    if n == 0 {
        return SymEigen { values: DVector::zeros(0), vectors: DMatrix::zeros(0, 0) };
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    fix_signs(&mut vectors);
    SymEigen { values, vectors }
}

/// `U diag(f(values)) Uᵀ`.
pub fn spectral_map(vectors: &DMatrix<f64>, values: &DVector<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(values[j]);
    }
    symmetrize(&(scaled * vectors.transpose()))
}

/// Relative tolerance under which an eigenvalue counts as zero.
pub const RANK_TOL: f64 = 1e-10;

pub fn numerical_rank(values: &DVector<f64>) -> usize {
    let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return 0;
    }
    values.iter().filter(|&&v| v > RANK_TOL * top).count()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| symmetrize(&c.inverse()))
}

/// Solves `(m + ridge I) x = b`, retrying with a small ridge if `m` is
/// numerically singular.
pub fn solve_with_ridge(m: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> DVector<f64> {
    if let Some(c) = m.clone().cholesky() {
        let x = c.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let scale = (m.trace() / m.nrows().max(1) as f64).abs().max(1.0);
    let mut reg = m.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += ridge * scale;
    }
    match reg.clone().cholesky() {
        Some(c) => c.solve(b),
        None => reg.pseudo_inverse(1e-12).map(|p| p * b).unwrap_or_else(|_| DVector::zeros(b.len())),
    }
}

/// Checks that a square matrix is PSD up to a relative tolerance.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<SymEigen> {
    let eig = sym_eigen_desc(m);
    let top = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if let Some(min) = eig.values.iter().copied().reduce(f64::min) {
        if min < -1e-10 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPsd(format!("{what} has eigenvalue {min:e}")));
        }
    }
    Ok(eig)
}
