//! Small linear-algebra glue layer.
//!
//! Matrices live in `ndarray` everywhere else in the crate; this module
//! owns the conversions to `nalgebra` for the few dense decompositions
//! we need (SVD, Cholesky, symmetric eigendecomposition) plus a couple
//! of numeric helpers.

use nalgebra as na;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DmhError, Result};
use crate::{Mat, Vec1};

/// Maximum Jacobi sweeps allowed for an SVD before we declare failure.
const SVD_MAX_ITER: usize = 1000;

pub fn to_na(m: &Mat) -> na::DMatrix<f64> {
    na::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub fn from_na(m: &na::DMatrix<f64>) -> Mat {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Frobenius norm.
pub fn fro_norm(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖AᵀA − I‖_F`: how far the columns of `A` are from orthonormal.
pub fn orthonormality_defect(a: &Mat) -> f64 {
    let g = a.t().dot(a);
    let mut s = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = g[[i, j]] - target;
            s += d * d;
        }
    }
    s.sqrt()
}

/// Thin SVD `M = U Σ Vᵀ`: returns `(U, σ, Vᵀ)` with `U` of the same
/// row count as `M` and `min(rows, cols)` columns. Rejects non-finite
/// input and non-convergence.
pub fn thin_svd(m: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(DmhError::Numeric("non-finite input to SVD".into()));
    }
    let svd = na::linalg::SVD::try_new(to_na(m), true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| DmhError::Numeric("SVD did not converge".into()))?;
    let u = from_na(svd.u.as_ref().expect("u requested"));
    let v_t = from_na(svd.v_t.as_ref().expect("v_t requested"));
    let sigma = svd.singular_values.iter().cloned().collect();
    Ok((u, sigma, v_t))
}

/// Nearest matrix with orthonormal columns (polar factor): for
/// `M = U Σ Vᵀ` returns `U Vᵀ`. Requires `nrows ≥ ncols` and full
/// column rank up to numerical tolerance.
pub fn polar_orthogonal(m: &Mat) -> Result<Mat> {
    if m.nrows() < m.ncols() {
        return Err(DmhError::shape(
            format!("rows >= cols"),
            format!("{}x{}", m.nrows(), m.ncols()),
            "polar orthogonalization",
        ));
    }
    let (u, sigma, v_t) = thin_svd(m)?;
    let smin = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 || smin <= smax * 1e-13 {
        return Err(DmhError::Numeric(format!(
            "rank-deficient matrix in polar orthogonalization (smin={smin:.3e}, smax={smax:.3e})"
        )));
    }
    Ok(u.dot(&v_t))
}

/// Cached Cholesky factorization of a symmetric positive-definite
/// matrix, for solving many right-hand sides against the same system.
pub struct SpdSolver {
    chol: na::linalg::Cholesky<f64, na::Dyn>,
    dim: usize,
}

impl SpdSolver {
    pub fn new(a: &Mat) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(DmhError::shape(
                "square matrix",
                format!("{}x{}", a.nrows(), a.ncols()),
                "SPD factorization",
            ));
        }
        let chol = na::linalg::Cholesky::new(to_na(a))
            .ok_or_else(|| DmhError::Numeric("matrix not positive definite in Cholesky".into()))?;
        Ok(SpdSolver { chol, dim: a.nrows() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn solve_vec(&self, b: &Vec1) -> Result<Vec1> {
        if b.len() != self.dim {
            return Err(DmhError::shape(
                format!("{}", self.dim),
                format!("{}", b.len()),
                "SPD solve rhs",
            ));
        }
        let rhs = na::DVector::from_iterator(b.len(), b.iter().cloned());
        let x = self.chol.solve(&rhs);
        Ok(Array1::from_iter(x.iter().cloned()))
    }
}

/// Solve `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Mat, b: &Vec1) -> Result<Vec1> {
    SpdSolver::new(a)?.solve_vec(b)
}

/// Condition number (ratio of extreme singular values) of a small
/// matrix. Returns `f64::INFINITY` when the smallest singular value is
/// zero.
pub fn condition_number(a: &Mat) -> Result<f64> {
    let svd = na::linalg::SVD::try_new(to_na(a), false, false, f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| DmhError::Numeric("SVD did not converge in condition estimate".into()))?;
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smin <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(smax / smin)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted in
/// descending order with matching eigenvector columns.
pub fn symmetric_eigen_desc(a: &Mat) -> Result<(Vec1, Mat)> {
    if a.nrows() != a.ncols() {
        return Err(DmhError::shape(
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
            "symmetric eigendecomposition",
        ));
    }
    let eig = na::linalg::SymmetricEigen::new(to_na(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Matrix with i.i.d. `N(0, std²)` entries drawn from `rng` in
/// row-major order.
pub fn random_gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Sign with the convention `sign(x) = 1` if `x > 0`, else `-1`
/// (zero maps to -1).
#[inline]
pub fn sign_pm1(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polar_factor_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let m = random_gaussian(&mut rng, 12, 5, 1.0);
            let q = polar_orthogonal(&m).unwrap();
            assert_eq!(q.dim(), (12, 5));
            assert!(orthonormality_defect(&q) < 1e-12);
        }
    }

    #[test]
    fn polar_of_orthonormal_matrix_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_gaussian(&mut rng, 9, 4, 1.0);
        let q = polar_orthogonal(&m).unwrap();
        let q2 = polar_orthogonal(&q).unwrap();
        assert!(fro_norm(&(&q2 - &q)) < 1e-12);
    }

    #[test]
    fn polar_maximizes_trace_alignment() {
        // The polar factor Q maximizes tr(QᵀM) over matrices with
        // orthonormal columns; spot-check against random competitors.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_gaussian(&mut rng, 8, 3, 1.0);
        let q = polar_orthogonal(&m).unwrap();
        let best = q.t().dot(&m).diag().sum();
        for _ in 0..20 {
            let other = polar_orthogonal(&random_gaussian(&mut rng, 8, 3, 1.0)).unwrap();
            let t = other.t().dot(&m).diag().sum();
            assert!(t <= best + 1e-10);
        }
    }

    #[test]
    fn polar_rejects_wide_and_rank_deficient() {
        let wide = Array2::<f64>::zeros((3, 5));
        assert!(polar_orthogonal(&wide).is_err());
        let mut rank1 = Array2::<f64>::zeros((6, 3));
        for i in 0..6 {
            for j in 0..3 {
                rank1[[i, j]] = (i as f64 + 1.0) * (j as f64 + 1.0);
            }
        }
        assert!(matches!(polar_orthogonal(&rank1), Err(DmhError::Numeric(_))));
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 5.0]];
        let x_true = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let x = solve_spd(&a, &b).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], x_true[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn spd_solver_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        assert!(SpdSolver::new(&a).is_err());
    }

    #[test]
    fn condition_number_of_identity_is_one() {
        let eye = Array2::<f64>::eye(4);
        assert_abs_diff_eq!(condition_number(&eye).unwrap(), 1.0, epsilon = 1e-12);
        let sing = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(condition_number(&sing).unwrap() > 1e12);
    }

    #[test]
    fn symmetric_eigen_sorted_and_consistent() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen_desc(&a).unwrap();
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-12);
        // A v = λ v for each column.
        for c in 0..2 {
            let v = vecs.column(c).to_owned();
            let av = a.dot(&v);
            for i in 0..2 {
                assert_abs_diff_eq!(av[i], vals[c] * v[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sign_convention_maps_zero_to_minus_one() {
        assert_eq!(sign_pm1(3.5), 1.0);
        assert_eq!(sign_pm1(-0.1), -1.0);
        assert_eq!(sign_pm1(0.0), -1.0);
    }

    #[test]
    fn random_gaussian_is_seed_deterministic() {
        let a = random_gaussian(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 0.5);
        let b = random_gaussian(&mut ChaCha8Rng::seed_from_u64(3), 4, 4, 0.5);
        assert_eq!(a, b);
    }
}
