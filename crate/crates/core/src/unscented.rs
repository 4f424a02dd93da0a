use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, JointGaussian};
use crate::linalg::{all_finite_vec, psd_cholesky};

/// Scaled unscented transform parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtConfig {
    /// `λ = α²(n + κ) − n`.
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        let spread = n as f64 + self.lambda(n);
        if !(spread > 0.0) {
            return Err(Error::Domain(format!(
                "n + lambda must be positive for n = {n} (got {spread})"
            )));
        }
        Ok(())
    }

    /// Mean and covariance weights for dimension `n`.
    pub fn weights(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate(n)?;
        let lambda = self.lambda(n);
        let spread = n as f64 + lambda;
        let wi = 1.0 / (2.0 * spread);
        let mut wm = vec![wi; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / spread;
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        Ok((wm, wc))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

impl SigmaPointSet {
    /// Sigma points of `N(mean, cov)`: the centre plus/minus the columns of
    /// the lower Cholesky factor of `(n + λ)·cov`.
    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>, cfg: &UtConfig) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(Error::shape("sigma points of an empty Gaussian"));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::shape("sigma point covariance dimension"));
        }
        let (mean_weights, cov_weights) = cfg.weights(n)?;
        let root = psd_cholesky(cov)? * (n as f64 + cfg.lambda(n)).sqrt();
        let mut points = Vec::with_capacity(2 * n + 1);
        points.push(mean.clone());
        for j in 0..n {
            points.push(mean + root.column(j));
        }
        for j in 0..n {
            points.push(mean - root.column(j));
        }
        Ok(Self {
            points,
            mean_weights,
            cov_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Applies `f` to every point, failing on the first non-finite output.
    pub fn propagate<F>(&self, f: F) -> Result<Vec<DVector<f64>>>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        self.points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let q = f(p);
                if all_finite_vec(&q) {
                    Ok(q)
                } else {
                    Err(Error::NonFinite { index })
                }
            })
            .collect()
    }

    pub fn mean_of(&self, values: &[DVector<f64>]) -> DVector<f64> {
        weighted_mean(values, &self.mean_weights)
    }

    pub fn cov_of(&self, values: &[DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
        weighted_cross(values, mean, values, mean, &self.cov_weights)
    }

    pub fn cross_of(
        &self,
        a: &[DVector<f64>],
        a_mean: &DVector<f64>,
        b: &[DVector<f64>],
        b_mean: &DVector<f64>,
    ) -> DMatrix<f64> {
        weighted_cross(a, a_mean, b, b_mean, &self.cov_weights)
    }
}

/// Weighted mean in deviation form around the centre point. With the large
/// opposite-signed weights of small α this is markedly more accurate than the
/// plain weighted sum.
pub fn weighted_mean(values: &[DVector<f64>], wm: &[f64]) -> DVector<f64> {
    let centre = &values[0];
    let mut acc = DVector::zeros(centre.len());
    for (v, w) in values.iter().zip(wm).skip(1) {
        acc.axpy(*w, &(v - centre), 1.0);
    }
    centre + acc
}

pub fn weighted_cross(
    a: &[DVector<f64>],
    a_mean: &DVector<f64>,
    b: &[DVector<f64>],
    b_mean: &DVector<f64>,
    wc: &[f64],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((x, y), w) in a.iter().zip(b).zip(wc) {
        out.ger(*w, &(x - a_mean), &(y - b_mean), 1.0);
    }
    out
}

pub fn sigma_points(g: &Gaussian, cfg: &UtConfig) -> Result<SigmaPointSet> {
    SigmaPointSet::from_moments(g.mean(), g.cov(), cfg)
}

/// Unscented approximation of the law of `f(x)`, `x ~ g`.
pub fn unscented_transform<F>(g: &Gaussian, f: F, cfg: &UtConfig) -> Result<Gaussian>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let set = sigma_points(g, cfg)?;
    let q = set.propagate(f)?;
    let mean = set.mean_of(&q);
    let cov = set.cov_of(&q, &mean);
    Gaussian::new(mean, cov)
}

/// Joint law of `(x, f(x))` from a single sigma-point pass; the cross block is
/// `Cov(x, f(x))`.
pub fn augmented_transform<F>(g: &Gaussian, f: F, cfg: &UtConfig) -> Result<JointGaussian>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let set = sigma_points(g, cfg)?;
    let q = set.propagate(f)?;
    let mean = set.mean_of(&q);
    let cov = set.cov_of(&q, &mean);
    let cross = set.cross_of(&set.points, g.mean(), &q, &mean);
    JointGaussian::new(g.clone(), Gaussian::new(mean, cov)?, cross)
}

/// For a joint `(x, y)`, the joint of `(h(A x + c), y)`. The affine stage is
/// applied exactly to the sigma points of the joint, so the root of the
/// transformed pair is the affine image of the input root.
pub fn joint_gaussian_from_two_stage<F>(
    g_joint: &JointGaussian,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    nonlinearity: F,
    cfg: &UtConfig,
) -> Result<JointGaussian>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d1 = g_joint.first.dim();
    let d2 = g_joint.second.dim();
    if a.ncols() != d1 || a.nrows() != c.len() {
        return Err(Error::shape(format!(
            "affine stage {}x{} with offset {} on a block of dimension {d1}",
            a.nrows(),
            a.ncols(),
            c.len()
        )));
    }
    let full = g_joint.full()?;
    let set = sigma_points(&full, cfg)?;
    let xi = set.propagate(|pt| nonlinearity(&(a * pt.rows(0, d1) + c)))?;
    let ys: Vec<DVector<f64>> = set.points.iter().map(|pt| pt.rows(d1, d2).into_owned()).collect();
    let xi_mean = set.mean_of(&xi);
    let xi_cov = set.cov_of(&xi, &xi_mean);
    let y_mean = set.mean_of(&ys);
    let cross = set.cross_of(&xi, &xi_mean, &ys, &y_mean);
    JointGaussian::new(Gaussian::new(xi_mean, xi_cov)?, g_joint.second.clone(), cross)
}
