use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the logistic, `e^{-x} / (1 + e^{-x})²`.
pub fn logistic_deriv(x: f64) -> f64 {
    let t = logistic(x);
    t * (1.0 - t)
}

/// Learnable parameter set: evolution matrix, input matrix, bias and the two
/// noise levels. `input_gain` scales the squared inputs before `g_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsDocument", try_from = "ParamsDocument")]
pub struct ReservoirParams {
    pub g: DMatrix<f64>,
    pub g_in: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub w: DMatrix<f64>,
    pub v: f64,
    pub input_gain: f64,
    pub seed: Option<u64>,
}

impl ReservoirParams {
    pub fn new(g: DMatrix<f64>, g_in: DMatrix<f64>, bias: DVector<f64>, w: DMatrix<f64>, v: f64) -> Result<Self> {
        let p = Self {
            g,
            g_in,
            bias,
            w,
            v,
            input_gain: 1.0,
            seed: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.g_in.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.g.nrows();
        if p == 0 || !self.g.is_square() {
            return Err(Error::shape("evolution matrix must be square and non-empty"));
        }
        if self.g_in.nrows() != p || self.bias.len() != p || self.w.shape() != (p, p) {
            return Err(Error::shape(format!(
                "inconsistent parameter shapes for p = {p}: g_in {:?}, bias {}, w {:?}",
                self.g_in.shape(),
                self.bias.len(),
                self.w.shape()
            )));
        }
        let finite = self
            .g
            .iter()
            .chain(self.g_in.iter())
            .chain(self.bias.iter())
            .chain(self.w.iter())
            .all(|x| x.is_finite());
        if !finite || !self.v.is_finite() || !self.input_gain.is_finite() {
            return Err(Error::Numerical("parameters contain non-finite values".into()));
        }
        if !(self.v > 0.0) {
            return Err(Error::Domain(format!(
                "observation variance must be positive, got {}",
                self.v
            )));
        }
        if (&self.w - self.w.transpose()).amax() > 1e-10 * self.w.amax().max(1.0) {
            return Err(Error::Domain("evolution noise covariance is not symmetric".into()));
        }
        Ok(())
    }

    /// `G_in (γ u²) + b`, the part of the pre-activation that does not depend on θ.
    pub fn drive(&self, u: &DVector<f64>) -> DVector<f64> {
        let u2 = u.map(|x| self.input_gain * x * x);
        &self.g_in * u2 + &self.bias
    }

    /// One deterministic step `τ(G θ + G_in u² + b)`.
    pub fn evolve(&self, theta: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if theta.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "evolve with state {} and input {} for p = {}, m = {}",
                theta.len(),
                u.len(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        if theta.iter().chain(u.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite input to evolve".into()));
        }
        Ok(self.evolve_with_drive(theta, &self.drive(u)))
    }

    pub(crate) fn evolve_with_drive(&self, theta: &DVector<f64>, drive: &DVector<f64>) -> DVector<f64> {
        (&self.g * theta + drive).map(logistic)
    }

    /// `‖G‖₁ + ‖G_in‖₁` (entrywise).
    pub fn l1_penalty(&self) -> f64 {
        self.g.iter().chain(self.g_in.iter()).map(|x| x.abs()).sum()
    }

    /// Hash of the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for x in self
            .g
            .iter()
            .chain(self.g_in.iter())
            .chain(self.bias.iter())
            .chain(self.w.iter())
            .chain([self.v, self.input_gain].iter())
        {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamsDocument {
    p: usize,
    m: usize,
    g: Vec<Vec<f64>>,
    g_in: Vec<Vec<f64>>,
    bias: Vec<f64>,
    w: Vec<Vec<f64>>,
    v: f64,
    #[serde(default = "one")]
    input_gain: f64,
    seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::shape(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<ReservoirParams> for ParamsDocument {
    fn from(p: ReservoirParams) -> Self {
        ParamsDocument {
            p: p.state_dim(),
            m: p.input_dim(),
            g: rows_of(&p.g),
            g_in: rows_of(&p.g_in),
            bias: p.bias.iter().copied().collect(),
            w: rows_of(&p.w),
            v: p.v,
            input_gain: p.input_gain,
            seed: p.seed,
        }
    }
}

impl TryFrom<ParamsDocument> for ReservoirParams {
    type Error = Error;

    fn try_from(d: ParamsDocument) -> Result<Self> {
        let params = ReservoirParams {
            g: from_rows(&d.g, d.p, d.p, "g")?,
            g_in: from_rows(&d.g_in, d.p, d.m, "g_in")?,
            bias: DVector::from_vec(d.bias),
            w: from_rows(&d.w, d.p, d.p, "w")?,
            v: d.v,
            input_gain: d.input_gain,
            seed: d.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Reservoir initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub p: usize,
    pub m: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub bias_mean: f64,
    pub bias_var: f64,
    /// Deterministic bias value; when set it replaces the normal draw.
    pub bias_fill: Option<f64>,
    pub input_gain: f64,
    pub w0: f64,
    pub v0: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            p: 8,
            m: 10,
            eta1: 0.97,
            eta2: 0.85,
            bias_mean: -2.0,
            bias_var: 1.0,
            bias_fill: None,
            input_gain: 1.0,
            w0: 1e-4,
            v0: 1e-2,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.p == 0 {
            v.push("reservoir.p must be at least 1".to_string());
        }
        if self.m == 0 {
            v.push("reservoir.m must be at least 1".to_string());
        }
        if !(self.eta1 > 0.0 && self.eta1 < 1.0) {
            v.push(format!("reservoir.eta1 must lie in (0, 1), got {}", self.eta1));
        }
        if !(self.eta2 > 0.0) {
            v.push(format!("reservoir.eta2 must be positive, got {}", self.eta2));
        }
        if !(self.bias_var >= 0.0) {
            v.push(format!(
                "reservoir.bias_var must be non-negative, got {}",
                self.bias_var
            ));
        }
        if !(self.w0 > 0.0) {
            v.push(format!("reservoir.w0 must be positive, got {}", self.w0));
        }
        if !(self.v0 > 0.0) {
            v.push(format!("reservoir.v0 must be positive, got {}", self.v0));
        }
        if !(self.input_gain.is_finite()) {
            v.push("reservoir.input_gain must be finite".to_string());
        }
        v
    }
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    // row-major draw order so the stream maps onto the serialized layout
    let vals: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_row_slice(r, c, &vals)
}

/// Echo-state initialization: standard-normal `G` rescaled to spectral radius
/// `eta1`, standard-normal `G_in` scaled by `eta2`.
pub fn init_reservoir(cfg: &InitConfig) -> Result<ReservoirParams> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = standard_normal_matrix(&mut rng, cfg.p, cfg.p);
    let mut rho = spectral_radius(&g)?;
    if rho == 0.0 {
        g = standard_normal_matrix(&mut rng, cfg.p, cfg.p);
        rho = spectral_radius(&g)?;
        if rho == 0.0 {
            return Err(Error::Numerical("drawn evolution matrix is nilpotent twice".into()));
        }
    }
    g *= cfg.eta1 / rho;
    let g_in = standard_normal_matrix(&mut rng, cfg.p, cfg.m) * cfg.eta2;
    let sd = cfg.bias_var.sqrt();
    let drawn: Vec<f64> = (0..cfg.p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.bias_mean + sd * z
        })
        .collect();
    let bias = match cfg.bias_fill {
        Some(b) => DVector::from_element(cfg.p, b),
        None => DVector::from_vec(drawn),
    };
    Ok(ReservoirParams {
        g,
        g_in,
        bias,
        w: DMatrix::identity(cfg.p, cfg.p) * cfg.w0,
        v: cfg.v0,
        input_gain: cfg.input_gain,
        seed: Some(cfg.seed),
    })
}

const POWER_ITERS: usize = 5000;

/// Largest eigenvalue modulus. Power iteration handles a dominant real
/// eigenvalue; complex or nearly tied dominant pairs fall back to the
/// Schur (shifted QR with deflation) eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::shape("spectral radius of a non-square or empty matrix"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("spectral radius of a non-finite matrix".into()));
    }
    let scale = m.amax();
    if scale == 0.0 {
        return Ok(0.0);
    }
    if let Some(r) = power_iteration(m, scale) {
        return Ok(r);
    }
    let eig = m
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?
        .complex_eigenvalues();
    Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

fn power_iteration(m: &DMatrix<f64>, scale: f64) -> Option<f64> {
    let n = m.nrows();
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64);
    x.normalize_mut();
    let tol = 1e-13 * scale * n as f64;
    for _ in 0..POWER_ITERS {
        let y = m * &x;
        let lambda = x.dot(&y);
        let resid = (&y - lambda * &x).norm();
        if resid <= tol {
            // A tiny residual certifies an eigenpair; guard against having
            // locked onto a subdominant one by checking a few more steps.
            let norm = y.norm();
            if norm == 0.0 {
                return None;
            }
            let z = m * (&y / norm);
            if (z.norm() - lambda.abs()).abs() <= 1e-12 * scale {
                return Some(lambda.abs());
            }
            return None;
        }
        let norm = y.norm();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        x = y / norm;
    }
    None
}

/// Scalar readout: mean of the state coordinates.
pub fn readout(theta: &DVector<f64>) -> Result<f64> {
    if theta.is_empty() {
        return Err(Error::shape("readout of an empty state"));
    }
    Ok(theta.mean())
}

/// Exact law of the readout under a Gaussian state.
pub fn readout_gaussian(g: &Gaussian) -> Result<Gaussian> {
    let p = g.dim();
    if p == 0 {
        return Err(Error::shape("readout of an empty state"));
    }
    let pf = p as f64;
    Gaussian::new(
        DVector::from_element(1, g.mean().sum() / pf),
        DMatrix::from_element(1, 1, g.cov().sum() / (pf * pf)),
    )
}
