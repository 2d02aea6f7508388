//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues of a symmetric matrix, as `(min, max)`.
pub fn sym_eig_bounds(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Eigenvalues of a symmetric matrix sorted ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    values.sort_by(f64::total_cmp);
    values
}

/// Smallest eigenpair of a symmetric matrix.
pub fn sym_min_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    extreme_eigenpair(m, true)
}

/// Largest eigenpair of a symmetric matrix.
pub fn sym_max_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    extreme_eigenpair(m, false)
}

fn extreme_eigenpair(m: &DMatrix<f64>, smallest: bool) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        let better = if smallest {
            eig.eigenvalues[i] < eig.eigenvalues[best]
        } else {
            eig.eigenvalues[i] > eig.eigenvalues[best]
        };
        if better {
            best = i;
        }
    }
    (
        eig.eigenvalues[best],
        eig.eigenvectors.column(best).into_owned(),
    )
}

/// Singular values sorted descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Numerical rank with tolerance `scale · ε · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, scale: usize) -> usize {
    let sv = singular_values(m);
    let Some(&sigma_max) = sv.first() else {
        return 0;
    };
    if sigma_max == 0.0 {
        return 0;
    }
    let tol = scale.max(1) as f64 * f64::EPSILON * sigma_max;
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Upper-triangular factor `U` with `UᵀU = M` for a symmetric positive definite `M`.
pub fn sqrt_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(m)).map(|c| c.l().transpose())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && nalgebra::Cholesky::new(symmetrize(m)).is_some()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}
