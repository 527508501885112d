//! Gram and second-moment matrices, and the PSD square root.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tokenio::TokenMatrix;

/// Inputs with an eigenvalue below this are rejected as not PSD.
pub const PSD_TOLERANCE: f64 = -1e-8;
/// Relative asymmetry accepted before symmetrizing.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

/// The `m x m` token interaction matrix `V V^T`, stored by rows `w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramRows {
    m: usize,
    data: Vec<f64>,
}

impl GramRows {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Row `w_i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, &self.data)
    }
}

/// A symmetric positive semidefinite `d x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    /// Wraps a square matrix after checking symmetry; the matrix is
    /// symmetrized exactly. PSD is checked lazily by the operations that need
    /// it.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        let asym = (&values - values.transpose()).amax();
        let scale = values.amax().max(1.0);
        if asym.is_nan() || asym > SYMMETRY_TOLERANCE * scale {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self(symmetrize(values)))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// `(X + X^T) / 2`.
pub fn symmetrize(x: DMatrix<f64>) -> DMatrix<f64> {
    let t = x.transpose();
    (x + t) * 0.5
}

pub fn gram(v: &TokenMatrix) -> GramRows {
    let m = v.rows();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        let ri = v.row(i);
        for j in i..m {
            let g = dot(ri, v.row(j));
            data[i * m + j] = g;
            data[j * m + i] = g;
        }
    }
    GramRows { m, data }
}

/// The uncentered second moment `V^T V / m`.
///
/// For a subset, pass the row submatrix `V_C` to get `V_C^T V_C / |C|`.
pub fn covariance(v: &TokenMatrix) -> CovarianceMatrix {
    let x = v.to_dmatrix();
    let mut s = x.tr_mul(&x);
    s /= v.rows() as f64;
    CovarianceMatrix(symmetrize(s))
}

/// Symmetric eigendecomposition with the residual `||X Q - Q L||_F` checked
/// against `1e-8 ||X||_F`.
pub fn sym_eigen(x: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::try_new(x.clone(), EIGEN_EPS, EIGEN_MAX_ITER).ok_or(Error::EigenFailed)?;
    let q = &eig.eigenvectors;
    let residual = (x * q - q * DMatrix::from_diagonal(&eig.eigenvalues)).norm();
    if residual > 1e-8 * x.norm().max(f64::MIN_POSITIVE) && residual > 1e-300 {
        return Err(Error::EigenFailed);
    }
    Ok(eig)
}

/// Eigenvalues of a symmetric PSD matrix, rejecting any below
/// [`PSD_TOLERANCE`] and clipping the rest at zero.
pub fn psd_eigenvalues(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = sym_eigen(x)?;
    check_psd(eig.eigenvalues.iter().copied())
}

fn check_psd(values: impl Iterator<Item = f64>) -> Result<Vec<f64>> {
    let values: Vec<f64> = values.collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min < PSD_TOLERANCE {
        return Err(Error::NotPsd(min));
    }
    Ok(values.into_iter().map(|l| l.max(0.0)).collect())
}

/// `sum_i sqrt(lambda_i)` over clipped PSD eigenvalues, treating values below
/// the numerical-rank threshold `10 n eps lambda_max` as exact zeros.
pub fn sqrt_eigen_sum(eigenvalues: &[f64]) -> f64 {
    let max = eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = 10.0 * eigenvalues.len() as f64 * f64::EPSILON * max;
    eigenvalues.iter().filter(|&&l| l > floor).map(|l| l.sqrt()).sum()
}

/// Principal square root of a symmetric PSD matrix, via eigendecomposition
/// with negative eigenvalues clipped to zero.
pub fn sqrt_psd(x: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    let eig = sym_eigen(&x.0)?;
    let roots = check_psd(eig.eigenvalues.iter().copied())?
        .into_iter()
        .map(f64::sqrt)
        .collect::<Vec<_>>();
    let q = &eig.eigenvectors;
    let scaled = q * DMatrix::from_diagonal(&DVector::from_vec(roots));
    Ok(CovarianceMatrix(symmetrize(scaled * q.transpose())))
}

/// `log det(A)` for a symmetric positive definite `A` via Cholesky.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(Error::NotPsd(f64::NAN))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenio::synth_gaussian;

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
        synth_gaussian(d, d, seed).to_dmatrix().qr().q()
    }

    #[test]
    fn gram_hand_cases() {
        let v = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(gram(&v).to_dmatrix(), DMatrix::identity(2, 2));
        let v = TokenMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(gram(&v).to_dmatrix(), DMatrix::from_element(2, 2, 2.0));
    }

    #[test]
    fn gram_matches_double_loop() {
        let v = synth_gaussian(5, 3, 3);
        let g = gram(&v);
        for i in 0..5 {
            for j in 0..5 {
                let mut naive = 0.0;
                for c in 0..3 {
                    naive += v.get(i, c) * v.get(j, c);
                }
                assert!((g.get(i, j) - naive).abs() < 1e-10);
                assert_eq!(g.row(i)[j], g.get(j, i));
            }
        }
    }

    #[test]
    fn covariance_hand_case() {
        let v = TokenMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(covariance(&v).matrix(), &(DMatrix::identity(2, 2) * 0.5));
    }

    #[test]
    fn covariance_matches_triple_loop_and_outer_products() {
        let v = synth_gaussian(6, 4, 9);
        let s = covariance(&v);
        let mut outer_sum = DMatrix::zeros(4, 4);
        for i in 0..6 {
            let r = DVector::from_row_slice(v.row(i));
            outer_sum += &r * r.transpose();
        }
        for a in 0..4 {
            for b in 0..4 {
                let mut naive = 0.0;
                for i in 0..6 {
                    naive += v.get(i, a) * v.get(i, b);
                }
                assert!((s.matrix()[(a, b)] - naive / 6.0).abs() < 1e-10);
            }
        }
        assert!(rel_frob(&(s.matrix() * 6.0), &outer_sum) < 1e-12);
    }

    #[test]
    fn normalized_covariance_has_unit_diagonal() {
        let (v, _) = crate::tokenio::normalize_unit_variance(&synth_gaussian(30, 5, 2), 1e-12);
        let s = covariance(&v);
        for j in 0..5 {
            assert!((s.matrix()[(j, j)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrt_diagonal_and_identity() {
        let r = sqrt_psd(&CovarianceMatrix::from_diagonal(&[4.0, 9.0])).unwrap();
        assert!(rel_frob(r.matrix(), CovarianceMatrix::from_diagonal(&[2.0, 3.0]).matrix()) < 1e-14);
        let r = sqrt_psd(&CovarianceMatrix::identity(4)).unwrap();
        assert!(rel_frob(r.matrix(), &DMatrix::identity(4, 4)) < 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        for seed in 0..20 {
            let a = synth_gaussian(5, 5, seed).to_dmatrix();
            let x = CovarianceMatrix::new(a.tr_mul(&a)).unwrap();
            let y = sqrt_psd(&x).unwrap();
            assert!(rel_frob(&(y.matrix() * y.matrix()), x.matrix()) < 1e-7);
            assert!(psd_eigenvalues(y.matrix()).is_ok());
        }
    }

    #[test]
    fn sqrt_commutes_with_orthogonal_diagonalization() {
        for seed in 0..20 {
            let u = random_orthogonal(4, 100 + seed);
            let diag: Vec<f64> = synth_gaussian(1, 4, seed).data().iter().map(|x| x * x).collect();
            let d = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
            let x = CovarianceMatrix::new(symmetrize(&u * d * u.transpose())).unwrap();
            let rd = DMatrix::from_diagonal(&DVector::from_vec(diag.iter().map(|x| x.sqrt()).collect()));
            let expected = &u * rd * u.transpose();
            assert!(rel_frob(sqrt_psd(&x).unwrap().matrix(), &expected) < 1e-7);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite_and_asymmetric() {
        let x = CovarianceMatrix::from_diagonal(&[1.0, -0.1]);
        assert!(matches!(sqrt_psd(&x), Err(Error::NotPsd(_))));
        // Slightly negative noise is clipped.
        let x = CovarianceMatrix::from_diagonal(&[1.0, -1e-10]);
        let r = sqrt_psd(&x).unwrap();
        assert_eq!(r.matrix()[(1, 1)], 0.0);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(CovarianceMatrix::new(a), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn gram_is_psd() {
        for seed in 0..100 {
            let m = 2 + (seed as usize % 9);
            let d = 1 + (seed as usize % 5);
            let g = gram(&synth_gaussian(m, d, seed)).to_dmatrix();
            let eig = sym_eigen(&g).unwrap();
            assert!(eig.eigenvalues.min() >= -1e-8);
        }
    }

    #[test]
    fn logdet_matches_determinant() {
        let a = synth_gaussian(4, 4, 1).to_dmatrix();
        let spd = a.tr_mul(&a) + DMatrix::identity(4, 4);
        assert!((logdet_spd(&spd).unwrap() - spd.determinant().ln()).abs() < 1e-10);
        assert_eq!(logdet_spd(&DMatrix::zeros(0, 0)).unwrap(), 0.0);
    }
}
