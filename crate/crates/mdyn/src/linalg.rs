//! Small self-contained linear-algebra and scaling utilities shared across
//! the crate: reduced row echelon form, null-space extraction, per-dimension
//! standardization, and a numerically stable log-sum-exp.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Pivot tolerance used for reduced-row-echelon computations throughout the
/// crate. Applied after rows are normalized to unit Euclidean norm, so it is
/// a scale-free cutoff; entries below it are treated as structural zeros.
pub const DEFAULT_RREF_TOL: f64 = 1e-9;

/// Reduced row echelon form with partial pivoting.
///
/// Rows are first normalized to unit norm so that `tol` acts as a relative
/// cutoff; entries with magnitude `<= tol` are treated as zero when choosing
/// pivots and are zeroed in the returned matrix. Returns the rref matrix and
/// the pivot column indices (one per nonzero row, ascending).
pub fn rref(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let mut a = m.clone();
    let (nrows, ncols) = a.shape();
    for r in 0..nrows {
        let norm = a.row(r).norm();
        if norm > tol {
            for c in 0..ncols {
                a[(r, c)] /= norm;
            }
        }
    }

    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..ncols {
        if row >= nrows {
            break;
        }
        // Partial pivot: largest magnitude in this column at or below `row`.
        let (best, best_abs) = (row..nrows)
            .map(|r| (r, a[(r, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if best_abs <= tol {
            continue;
        }
        a.swap_rows(row, best);
        let pivot = a[(row, col)];
        for c in 0..ncols {
            a[(row, c)] /= pivot;
        }
        a[(row, col)] = 1.0;
        for r in 0..nrows {
            if r != row {
                let factor = a[(r, col)];
                if factor != 0.0 {
                    for c in 0..ncols {
                        a[(r, c)] -= factor * a[(row, c)];
                    }
                    a[(r, col)] = 0.0;
                }
            }
        }
        pivots.push(col);
        row += 1;
    }

    for v in a.iter_mut() {
        if v.abs() <= tol {
            *v = 0.0;
        }
    }
    (a, pivots)
}

/// Singular spectrum and full right-singular basis of a rectangular matrix,
/// computed from the symmetric eigendecomposition of `AᵀA`.
///
/// Unlike a thin SVD this always returns all `ncols` directions, so
/// directions outside the row space show up explicitly with singular value
/// zero — exactly what null-space extraction needs when there are fewer
/// rows than columns. Returned singular values are sorted descending and
/// `basis.column(i)` is the right-singular vector for `singular_values[i]`.
pub fn right_singular_basis(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let p = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sigmas: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let mut basis = DMatrix::zeros(p, p);
    for (k, &i) in order.iter().enumerate() {
        basis.set_column(k, &eig.eigenvectors.column(i));
    }
    (sigmas, basis)
}

/// `log(Σ exp(v_i))` with the usual max shift; exact when one term dominates.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-dimension affine scaling to zero mean and unit variance, fitted on a
/// training set and then applied consistently to queries. Dimensions with
/// (near-)zero spread keep scale 1 so constant features pass through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const MIN_SPREAD: f64 = 1e-12;

impl Standardizer {
    /// Identity scaling for `dim` dimensions.
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fit mean and standard deviation per dimension. Panics on an empty
    /// slice or inconsistent dimensions.
    pub fn fit(data: &[DVector<f64>]) -> Self {
        assert!(!data.is_empty(), "cannot fit a standardizer to no data");
        let dim = data[0].len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in data {
            assert_eq!(v.len(), dim, "inconsistent dimension in standardizer fit");
            for i in 0..dim {
                mean[i] += v[i];
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for v in data {
            for i in 0..dim {
                let d = v[i] - mean[i];
                var[i] += d * d;
            }
        }
        let scale = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                if sd > MIN_SPREAD {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| (v[i] - self.mean[i]) / self.scale[i])
    }

    pub fn inverse_transform(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i] * self.scale[i] + self.mean[i])
    }
}

/// Scalar counterpart of [`Standardizer`] for label vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarScaler {
    pub mean: f64,
    pub scale: f64,
}

impl ScalarScaler {
    pub fn identity() -> Self {
        ScalarScaler {
            mean: 0.0,
            scale: 1.0,
        }
    }

    pub fn fit(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "cannot fit a scaler to no data");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        ScalarScaler {
            mean,
            scale: if sd > MIN_SPREAD { sd } else { 1.0 },
        }
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn inverse_transform(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}
