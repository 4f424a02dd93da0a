//! Independent reference implementations shared by the integration tests and
//! the acceptance harness. Nothing here calls the filtering, smoothing or
//! expectation code under test.
#![allow(dead_code)]

pub mod criteria;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use urs_core::gem::log_likelihood;
use urs_core::reservoir::{init_reservoir, InitConfig, ReservoirParams};
use urs_core::series::{initial_belief, Series};
use urs_core::ssm::{
    forward_filter, rts_smooth, LinearDynamics, LinearObservation, OptionObservation, SmoothedTrajectory,
};
use urs_core::synthetic::{generate_dataset, SyntheticConfig};
use urs_core::{Gaussian, OptionSpec, UtConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Random SPD matrix `L Lᵀ + floor·I`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let l = normal_matrix(rng, n, n) * scale;
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// A stable random affine state-space model with its simulated data.
pub struct LinearCase {
    pub dynamics: LinearDynamics,
    pub observation: LinearObservation,
    pub initial: Gaussian,
    pub inputs: Vec<DVector<f64>>,
    pub obs: Vec<DVector<f64>>,
}

pub fn linear_case(seed: u64, p: usize, q: usize, t_len: usize) -> LinearCase {
    let mut r = rng(seed);
    let raw = normal_matrix(&mut r, p, p);
    let rho = raw
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0f64, f64::max);
    let a = raw * (0.9 / rho.max(1e-12));
    let m = 2;
    let b = normal_matrix(&mut r, p, m) * 0.5;
    let c = normal_vector(&mut r, p) * 0.1;
    let w = spd(&mut r, p, 0.3, 0.05);
    let h = normal_matrix(&mut r, q, p);
    let d = normal_vector(&mut r, q) * 0.1;
    let v = 0.2 + r.random::<f64>();
    let initial = Gaussian::new(normal_vector(&mut r, p), spd(&mut r, p, 0.5, 0.1)).unwrap();
    let wl = w.clone().cholesky().unwrap().l();
    let mut x = initial.mean().clone();
    let mut inputs = Vec::new();
    let mut obs = Vec::new();
    for _ in 0..t_len {
        let u = normal_vector(&mut r, m);
        x = &a * &x + &b * &u + &c + &wl * normal_vector(&mut r, p);
        obs.push(&h * &x + &d + normal_vector(&mut r, q) * v.sqrt());
        inputs.push(u);
    }
    LinearCase {
        dynamics: LinearDynamics { a, b, c, w },
        observation: LinearObservation { h, d, v },
        initial,
        inputs,
        obs,
    }
}

/// Textbook Kalman filter and RTS smoother.
pub struct KalmanReference {
    pub prior_means: Vec<DVector<f64>>,
    pub prior_covs: Vec<DMatrix<f64>>,
    pub post_means: Vec<DVector<f64>>,
    pub post_covs: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
    /// Smoothed moments for `t = 0..T`.
    pub smooth_means: Vec<DVector<f64>>,
    pub smooth_covs: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_{t+1} | all data)` for `t = 0..T−1`.
    pub smooth_cross: Vec<DMatrix<f64>>,
}

pub fn kalman_reference(case: &LinearCase) -> KalmanReference {
    let LinearDynamics { a, b, c, w } = &case.dynamics;
    let LinearObservation { h, d, v } = &case.observation;
    let q = h.nrows();
    let mut m = case.initial.mean().clone();
    let mut p = case.initial.cov().clone();
    let mut out = KalmanReference {
        prior_means: vec![],
        prior_covs: vec![],
        post_means: vec![],
        post_covs: vec![],
        log_evidence: 0.0,
        smooth_means: vec![],
        smooth_covs: vec![],
        smooth_cross: vec![],
    };
    for (u, y) in case.inputs.iter().zip(&case.obs) {
        let mp = a * &m + b * u + c;
        let pp = a * &p * a.transpose() + w;
        let s = h * &pp * h.transpose() + DMatrix::identity(q, q) * *v;
        let s_inv = s.clone().try_inverse().unwrap();
        let k = &pp * h.transpose() * &s_inv;
        let innov = y - (h * &mp + d);
        out.log_evidence += -0.5
            * (q as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + innov.dot(&(&s_inv * &innov)));
        m = &mp + &k * &innov;
        p = &pp - &k * &s * k.transpose();
        out.prior_means.push(mp);
        out.prior_covs.push(pp);
        out.post_means.push(m.clone());
        out.post_covs.push(p.clone());
    }
    let n = case.obs.len();
    let mut sm = vec![DVector::zeros(0); n + 1];
    let mut sc = vec![DMatrix::zeros(0, 0); n + 1];
    let mut cross = vec![DMatrix::zeros(0, 0); n];
    sm[n] = out.post_means[n - 1].clone();
    sc[n] = out.post_covs[n - 1].clone();
    for t in (0..n).rev() {
        let (mf, pf) = if t == 0 {
            (case.initial.mean().clone(), case.initial.cov().clone())
        } else {
            (out.post_means[t - 1].clone(), out.post_covs[t - 1].clone())
        };
        let pp_inv = out.prior_covs[t].clone().try_inverse().unwrap();
        let j = &pf * a.transpose() * pp_inv;
        sm[t] = &mf + &j * (&sm[t + 1] - &out.prior_means[t]);
        sc[t] = &pf + &j * (&sc[t + 1] - &out.prior_covs[t]) * j.transpose();
        cross[t] = &j * &sc[t + 1];
    }
    out.smooth_means = sm;
    out.smooth_covs = sc;
    out.smooth_cross = cross;
    out
}

/// Risk-neutral Monte Carlo call price and its standard error.
pub fn mc_call(spec: &OptionSpec, sigma: f64, paths: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let t = spec.maturity;
    let drift = (spec.rate - 0.5 * sigma * sigma) * t;
    let vol = sigma * t.sqrt();
    let disc = (-spec.rate * t).exp();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..paths {
        let z: f64 = StandardNormal.sample(&mut r);
        let x = disc * (spec.spot * (drift + vol * z).exp() - spec.strike).max(0.0);
        s1 += x;
        s2 += x * x;
    }
    let n = paths as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Synthetic series, randomly initialized reservoir (with `v = 1`) and its smoothed
/// trajectory under the unscented filter.
pub struct EsnFixture {
    pub data: Series,
    pub params: ReservoirParams,
    pub initial: Gaussian,
    pub traj: SmoothedTrajectory,
}

pub fn esn_fixture(p: usize, m: usize, n: usize, seed: u64) -> EsnFixture {
    let mut sc = SyntheticConfig::stationary(seed);
    sc.cir.n = n;
    let data = generate_dataset(&sc).unwrap().to_series(m).unwrap();
    let mut params = init_reservoir(&InitConfig {
        p,
        m,
        bias_fill: Some(-2.3),
        seed,
        ..InitConfig::default()
    })
    .unwrap();
    params.v = 1.0;
    let initial = initial_belief(&data, p, 1e-4).unwrap();
    let model = OptionObservation { v: params.v };
    let states = forward_filter(
        &params,
        &model,
        &initial,
        &data.inputs,
        &data.batches,
        &UtConfig::default(),
    )
    .unwrap();
    let traj = rts_smooth(&initial, &states).unwrap();
    EsnFixture {
        data,
        params,
        initial,
        traj,
    }
}

fn sample(g: &Gaussian, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    g.mean() + chol * normal_vector(rng, g.dim())
}

/// Monte Carlo estimate of the expected complete-data log-likelihood: every
/// step's contribution is averaged over draws from its smoothed pair joint
/// `(θ_{t−1}, θ_t)`. Steps are sampled independently, so the standard error
/// combines per-step variances.
pub fn mc_expected_loglik(fx: &EsnFixture, draws: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let p = fx.params.state_dim();
    let (mut total, mut var) = (0.0, 0.0);
    for t in 1..=fx.traj.len() {
        let joint = fx.traj.pair(t).unwrap().full().unwrap();
        let chol = psd_sqrt(joint.cov());
        let step = fx.data.slice(t - 1, t);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let z = sample(&joint, &chol, &mut r);
            let path = [z.rows(0, p).into_owned(), z.rows(p, p).into_owned()];
            let x = log_likelihood(&path, &fx.params, &step).unwrap();
            s1 += x;
            s2 += x * x;
        }
        let n = draws as f64;
        let mean = s1 / n;
        total += mean;
        var += (s2 / n - mean * mean) / (n - 1.0);
    }
    (total, var.sqrt())
}

/// Symmetric square root through the eigendecomposition (tolerates the
/// rank-deficient pair covariances smoothing can produce).
pub fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let e = c.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}
