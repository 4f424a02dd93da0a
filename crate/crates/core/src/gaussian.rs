use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_det_chol, repair_cov, right_solve_spd, spd_factor, symmetrize};

/// Multivariate normal belief. The covariance is kept symmetric and PSD by
/// construction (see [`repair_cov`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::shape(format!(
                "mean has dimension {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("gaussian moments are not finite".into()));
        }
        Ok(Self {
            mean,
            cov: repair_cov(&cov),
        })
    }

    pub fn point_mass(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(d, d),
        }
    }

    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.mean, self.cov)
    }

    /// Moments of `A x + c`.
    pub fn affine_transform(&self, a: &DMatrix<f64>, c: &DVector<f64>) -> Result<Gaussian> {
        if a.ncols() != self.dim() || a.nrows() != c.len() {
            return Err(Error::shape(format!(
                "affine map {}x{} with offset {} applied to dimension {}",
                a.nrows(),
                a.ncols(),
                c.len(),
                self.dim()
            )));
        }
        Gaussian::new(a * &self.mean + c, symmetrize(&(a * &self.cov * a.transpose())))
    }

    /// `E[xᵀ M x] = tr(M C) + mᵀ M m`.
    pub fn expect_quadratic_form(&self, m: &DMatrix<f64>) -> Result<f64> {
        if m.nrows() != self.dim() || m.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "{}x{} quadratic form on dimension {}",
                m.nrows(),
                m.ncols(),
                self.dim()
            )));
        }
        Ok((m * &self.cov).trace() + self.mean.dot(&(m * &self.mean)))
    }

    /// Log density; needs a nonsingular covariance (jitter permitted).
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("log density argument dimension"));
        }
        let chol = spd_factor(&self.cov)?;
        let r = x - &self.mean;
        let z = chol.solve(&r);
        let d = self.dim() as f64;
        Ok(-0.5 * (r.dot(&z) + log_det_chol(&chol) + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// Two jointly Gaussian blocks with `cross = Cov(first, second)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointGaussian {
    pub first: Gaussian,
    pub second: Gaussian,
    pub cross: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(first: Gaussian, second: Gaussian, cross: DMatrix<f64>) -> Result<Self> {
        if cross.nrows() != first.dim() || cross.ncols() != second.dim() {
            return Err(Error::shape(format!(
                "cross-covariance {}x{} for blocks of dimension {} and {}",
                cross.nrows(),
                cross.ncols(),
                first.dim(),
                second.dim()
            )));
        }
        Ok(Self { first, second, cross })
    }

    /// Splits an assembled Gaussian after the first `d1` coordinates.
    pub fn split(g: &Gaussian, d1: usize) -> Result<Self> {
        let d = g.dim();
        if d1 > d {
            return Err(Error::shape("split index beyond dimension"));
        }
        let d2 = d - d1;
        let first = Gaussian::new(
            g.mean.rows(0, d1).into_owned(),
            g.cov.view((0, 0), (d1, d1)).into_owned(),
        )?;
        let second = Gaussian::new(
            g.mean.rows(d1, d2).into_owned(),
            g.cov.view((d1, d1), (d2, d2)).into_owned(),
        )?;
        Self::new(first, second, g.cov.view((0, d1), (d1, d2)).into_owned())
    }

    /// The assembled (first; second) Gaussian.
    pub fn full(&self) -> Result<Gaussian> {
        let (d1, d2) = (self.first.dim(), self.second.dim());
        let mut mean = DVector::zeros(d1 + d2);
        mean.rows_mut(0, d1).copy_from(self.first.mean());
        mean.rows_mut(d1, d2).copy_from(self.second.mean());
        let mut cov = DMatrix::zeros(d1 + d2, d1 + d2);
        cov.view_mut((0, 0), (d1, d1)).copy_from(self.first.cov());
        cov.view_mut((d1, d1), (d2, d2)).copy_from(self.second.cov());
        cov.view_mut((0, d1), (d1, d2)).copy_from(&self.cross);
        cov.view_mut((d1, 0), (d2, d1)).copy_from(&self.cross.transpose());
        Gaussian::new(mean, cov)
    }

    pub fn swap(&self) -> JointGaussian {
        JointGaussian {
            first: self.second.clone(),
            second: self.first.clone(),
            cross: self.cross.transpose(),
        }
    }
}

/// Distribution of the first block given the second block equals `observed`.
pub fn condition(j: &JointGaussian, observed: &DVector<f64>) -> Result<Gaussian> {
    if observed.len() != j.second.dim() {
        return Err(Error::shape(format!(
            "observed value of dimension {} for a block of dimension {}",
            observed.len(),
            j.second.dim()
        )));
    }
    let gain = right_solve_spd(&j.cross, j.second.cov())?;
    let mean = j.first.mean() + &gain * (observed - j.second.mean());
    let cov = j.first.cov() - &gain * j.cross.transpose();
    Gaussian::new(mean, cov)
}
