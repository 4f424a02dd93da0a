//! Small dense helpers shared by the Gaussian algebra, the filters and the
//! M-step: symmetrization, eigenvalue-floor repair, a semidefinite-tolerant
//! Cholesky and jittered SPD factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor applied by [`repair_cov`].
pub const EIG_FLOOR: f64 = 1e-12;

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes and lifts eigenvalues below `EIG_FLOOR * λmax` to that floor.
/// Matrices that already satisfy the floor are returned symmetrized but
/// otherwise untouched, so exact inputs stay exact.
pub fn repair_cov(m: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(m);
    if s.nrows() == 0 || s.iter().all(|&x| x == 0.0) {
        return s;
    }
    let eig = SymmetricEigen::new(s.clone());
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return DMatrix::zeros(s.nrows(), s.ncols());
    }
    let floor = EIG_FLOOR * lmax;
    if eig.eigenvalues.min() >= floor {
        return s;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()))
}

/// Ratio of extreme absolute eigenvalues of the symmetric part; used only
/// for error reports.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let abs = eig.eigenvalues.map(f64::abs);
    let (lo, hi) = (abs.min(), abs.max());
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn mean_abs_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n
}

fn jitter_levels() -> impl Iterator<Item = f64> {
    std::iter::successors(Some(JITTER_START), |e| {
        let next = e * 10.0;
        (next <= JITTER_MAX * 1.000_001).then_some(next)
    })
}

/// Lower factor `L` with `L Lᵀ = a` for symmetric positive *semi*-definite
/// `a`. Pivots that vanish to rounding level produce zero columns instead of
/// failing; genuinely indefinite input triggers jitter escalation.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "square root of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("covariance has non-finite entries".into()));
    }
    if let Some(l) = semidefinite_factor(a) {
        return Ok(l);
    }
    let scale = mean_abs_diag(a).max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for eps in jitter_levels() {
        let shifted = a + DMatrix::identity(n, n) * (eps * scale);
        if let Some(l) = semidefinite_factor(&shifted) {
            log::debug!("cholesky needed jitter {eps:e}");
            return Ok(l);
        }
    }
    Err(Error::Numerical(format!(
        "cholesky failed after jitter up to {JITTER_MAX:e} (condition estimate {:.3e})",
        condition_estimate(a)
    )))
}

fn semidefinite_factor(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let tol = 64.0 * f64::EPSILON * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > tol {
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        } else if d < -tol {
            return None;
        }
    }
    Some(l)
}

/// Cholesky of a symmetric positive-definite matrix with jitter escalation.
pub fn spd_factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(Error::shape(format!(
            "factorization of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let s = symmetrize(a);
    if let Some(c) = Cholesky::new(s.clone()) {
        return Ok(c);
    }
    let scale = mean_abs_diag(&s);
    if scale > 0.0 && scale.is_finite() {
        let n = s.nrows();
        for eps in jitter_levels() {
            if let Some(c) = Cholesky::new(&s + DMatrix::identity(n, n) * (eps * scale)) {
                log::debug!("spd solve needed jitter {eps:e}");
                return Ok(c);
            }
        }
    }
    Err(Error::Numerical(format!(
        "matrix is singular beyond the regularization floor (condition estimate {:.3e})",
        condition_estimate(&s)
    )))
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&spd_factor(a)?.inverse()))
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `X = B A⁻¹` for SPD `A`, computed as `(A⁻¹ Bᵀ)ᵀ`.
pub fn right_solve_spd(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = spd_factor(a)?;
    Ok(c.solve(&b.transpose()).transpose())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_root_of_singular_matrix() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let a = &v * v.transpose();
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-12);
        assert!(psd_cholesky(&DMatrix::zeros(3, 3)).unwrap().amax() == 0.0);
    }

    #[test]
    fn block_with_zero_variance() {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 0)] = 2.0;
        a[(0, 2)] = 0.5;
        a[(2, 0)] = 0.5;
        a[(2, 2)] = 1.0;
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-14);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(psd_cholesky(&a), Err(Error::Numerical(_))));
        assert!(matches!(spd_factor(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn repair_lifts_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 + 1e-9, 1.0, 1.0]);
        let r = repair_cov(&a);
        let eig = SymmetricEigen::new(r.clone());
        assert!(eig.eigenvalues.min() >= EIG_FLOOR * eig.eigenvalues.max() * 0.999);
        assert_eq!(r, r.transpose());
    }

    #[test]
    fn repair_keeps_healthy_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(repair_cov(&a), a);
    }
}
