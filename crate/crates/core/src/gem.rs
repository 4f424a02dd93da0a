//! Offline generalized EM: expected complete-data log-likelihood over the
//! smoothed trajectory, its Lasso-penalized loss, and a proximal-gradient
//! M-step with backtracking.
//!
//! Every step-`t` evolution term is linear in `P = W⁻¹`, so the smooth loss is
//!
//! ```text
//! f = (T/2) log|W| + ½ tr(P M) + (N/2) log v + R / (2v)
//! ```
//!
//! where `M = Σ_t E[(θ_t − Ξ_t)(θ_t − Ξ_t)ᵀ]` depends on `(G, G_in, b)` and
//! `R` (the expected squared price residual) does not. The gradient is
//! accumulated by hand through the sigma points.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::relative_error_step;
use crate::gaussian::{Gaussian, JointGaussian};
use crate::linalg::{log_det_chol, spd_factor, symmetrize, EIG_FLOOR};
use crate::par::Exec;
use crate::pricing::batch_unchecked;
use crate::reservoir::{logistic, logistic_deriv, readout_gaussian, ReservoirParams};
use crate::series::Series;
use crate::ssm::{
    clamp_sigma, forward_filter, k_step_predict, rts_smooth, update, OptionObservation, SmoothedTrajectory,
};
use crate::unscented::{joint_gaussian_from_two_stage, weighted_cross, weighted_mean, SigmaPointSet, UtConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermIiMethod {
    JointUt,
    Taylor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GemConfig {
    pub lasso_alpha: f64,
    pub term_ii_method: TermIiMethod,
    /// Outer filter → smooth → M-step iterations.
    pub max_iters: usize,
    /// Proximal-gradient steps per M-step.
    pub inner_steps: usize,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub step_growth: f64,
    pub max_backtracks: usize,
    /// Outer iterations without validation improvement before stopping.
    pub patience: usize,
    /// Relative loss decrease below which the outer loop stops.
    pub tol: f64,
    /// Closed-form block update of `W` and `v` at the start of each M-step.
    pub update_noise: bool,
    /// Move the initial belief mean to the smoothed time-0 mean each iteration.
    pub reset_initial_mean: bool,
    pub min_variance: f64,
    /// Set from the run-level sigma-point settings.
    #[serde(skip)]
    pub ut: UtConfig,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            lasso_alpha: 0.05,
            term_ii_method: TermIiMethod::JointUt,
            max_iters: 30,
            inner_steps: 10,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            step_growth: 2.0,
            max_backtracks: 80,
            patience: 5,
            tol: 1e-7,
            update_noise: true,
            reset_initial_mean: true,
            min_variance: 1e-10,
            ut: UtConfig::default(),
            exec: Exec::default(),
        }
    }
}

impl GemConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lasso_alpha >= 0.0) {
            v.push(format!(
                "gem.lasso_alpha must be non-negative, got {}",
                self.lasso_alpha
            ));
        }
        if !(self.initial_step > 0.0) {
            v.push("gem.initial_step must be positive".to_string());
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            v.push("gem.backtrack_factor must lie in (0, 1)".to_string());
        }
        if !(self.step_growth >= 1.0) {
            v.push("gem.step_growth must be at least 1".to_string());
        }
        if !(self.min_variance > 0.0) {
            v.push("gem.min_variance must be positive".to_string());
        }
        if !(self.ut.alpha > 0.0) {
            v.push("ut.alpha must be positive".to_string());
        }
        v
    }
}

/// Deterministic complete-data log-likelihood of a full state path
/// `θ_0..θ_T` (additive constants dropped).
pub fn log_likelihood(path: &[DVector<f64>], params: &ReservoirParams, data: &Series) -> Result<f64> {
    if path.len() != data.len() + 1 {
        return Err(Error::shape(format!(
            "state path of length {} for a series of length {}",
            path.len(),
            data.len()
        )));
    }
    params.validate()?;
    let chol = spd_factor(&params.w).map_err(|e| Error::Domain(format!("evolution noise covariance: {e}")))?;
    let t_len = data.len() as f64;
    let mut quad = 0.0;
    let mut resid = 0.0;
    let mut n_obs = 0.0;
    for (k, (u, batch)) in data.inputs.iter().zip(&data.batches).enumerate() {
        let r = &path[k + 1] - params.evolve(&path[k], u)?;
        quad += r.dot(&chol.solve(&r));
        let sigma = clamp_sigma(path[k + 1].mean());
        let y_hat = batch_unchecked(&batch.specs, sigma);
        resid += (&batch.prices - y_hat).norm_squared();
        n_obs += batch.len() as f64;
    }
    Ok(-0.5 * t_len * log_det_chol(&chol) - 0.5 * n_obs * params.v.ln() - 0.5 * quad - resid / (2.0 * params.v))
}

/// Per-step values of the five expectations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTerms {
    pub i: f64,
    pub ii: f64,
    pub iii: f64,
    /// Ψ_μ per option.
    pub iv: DVector<f64>,
    /// (Ψ_μ)² + Ψ_Σ per option.
    pub v: DVector<f64>,
    pub xi_mean: DVector<f64>,
    pub xi_cov: DMatrix<f64>,
    pub psi_var: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EStepCache {
    pub method: TermIiMethod,
    pub terms: Vec<StepTerms>,
}

/// `tr(W⁻¹ Σ**) + (m*_t)ᵀ W⁻¹ Ξ_μ` through the two-stage joint transform.
pub fn term_ii_joint_ut(
    pair: &JointGaussian,
    params: &ReservoirParams,
    u: &DVector<f64>,
    winv: &DMatrix<f64>,
    cfg: &UtConfig,
) -> Result<f64> {
    let c = params.drive(u);
    let j = joint_gaussian_from_two_stage(pair, &params.g, &c, |z| z.map(logistic), cfg)?;
    Ok((winv * j.cross.transpose()).trace() + pair.second.mean().dot(&(winv * j.first.mean())))
}

/// First-order (Taylor) approximation of term ii.
pub fn term_ii_taylor(
    pair: &JointGaussian,
    params: &ReservoirParams,
    u: &DVector<f64>,
    winv: &DMatrix<f64>,
) -> Result<f64> {
    let p = params.state_dim();
    if pair.first.dim() != p || pair.second.dim() != p || winv.shape() != (p, p) {
        return Err(Error::shape("taylor term on mismatched dimensions"));
    }
    let a = &params.g * pair.first.mean() + params.drive(u);
    let tau = a.map(logistic);
    let n = a.map(logistic_deriv);
    // Σ*_{t,t−1} = Cov(θ_t, θ_{t−1})
    let s = pair.cross.transpose();
    let diag = (winv * s * params.g.transpose()).diagonal();
    Ok(pair.second.mean().dot(&(winv * tau)) + n.dot(&diag))
}

struct PairStep {
    xs: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
    wm: Vec<f64>,
    wc: Vec<f64>,
    m: DVector<f64>,
    m_prev: DVector<f64>,
    /// Cov(θ_t, θ_{t−1} | D_T)
    s_cross: DMatrix<f64>,
    drive_in: DVector<f64>,
}

/// G-dependent pieces of one step: `ii = tr(P X)`, `iii = tr(P Y)`.
struct StepEval {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    xi_mean: DVector<f64>,
    xi_cov: DMatrix<f64>,
    grad_g: DMatrix<f64>,
    grad_c: DVector<f64>,
}

/// Smooth part of the loss with the E-step quantities frozen.
pub struct MStepObjective {
    method: TermIiMethod,
    exec: Exec,
    steps: Vec<PairStep>,
    state_term: DMatrix<f64>,
    state_terms: Vec<DMatrix<f64>>,
    obs_resid: f64,
    n_obs: f64,
    obs_terms: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
    t_len: usize,
    p: usize,
}

/// Gradient with respect to every free parameter. `w_chol` is the gradient
/// with respect to the lower Cholesky factor of `W`, `log_v` with respect to
/// `ln v`.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub g: DMatrix<f64>,
    pub g_in: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub w: DMatrix<f64>,
    pub w_chol: DMatrix<f64>,
    pub log_v: f64,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub m: DMatrix<f64>,
    pub grad: Option<LossGradient>,
}

impl MStepObjective {
    pub fn new(traj: &SmoothedTrajectory, data: &Series, params: &ReservoirParams, cfg: &GemConfig) -> Result<Self> {
        let t_len = data.len();
        if traj.marginals.len() != t_len + 1 || traj.cross.len() != t_len {
            return Err(Error::Contract(format!(
                "smoothed trajectory with {} marginals and {} cross-covariances for {} steps",
                traj.marginals.len(),
                traj.cross.len(),
                t_len
            )));
        }
        if t_len == 0 {
            return Err(Error::Contract("E-step needs at least one step".into()));
        }
        let p = params.state_dim();
        let ut = cfg.ut;
        let method = cfg.term_ii_method;
        let steps: Vec<PairStep> = cfg.exec.try_map_range(t_len, |k| -> Result<PairStep> {
            let prev = &traj.marginals[k];
            let cur = &traj.marginals[k + 1];
            let drive_in = data.inputs[k].map(|x| params.input_gain * x * x);
            let (xs, ys, wm, wc) = match method {
                TermIiMethod::JointUt => {
                    let pair = JointGaussian::new(prev.clone(), cur.clone(), traj.cross[k].clone())?.full()?;
                    let set = SigmaPointSet::from_moments(pair.mean(), pair.cov(), &ut)?;
                    let xs = set.points.iter().map(|x| x.rows(0, p).into_owned()).collect();
                    let ys = set.points.iter().map(|x| x.rows(p, p).into_owned()).collect();
                    (xs, ys, set.mean_weights, set.cov_weights)
                }
                TermIiMethod::Taylor => {
                    let set = SigmaPointSet::from_moments(prev.mean(), prev.cov(), &ut)?;
                    (set.points, Vec::new(), set.mean_weights, set.cov_weights)
                }
            };
            Ok(PairStep {
                xs,
                ys,
                wm,
                wc,
                m: cur.mean().clone(),
                m_prev: prev.mean().clone(),
                s_cross: traj.cross[k].transpose(),
                drive_in,
            })
        })?;
        let state_terms: Vec<DMatrix<f64>> = (1..=t_len)
            .map(|t| {
                let g = &traj.marginals[t];
                g.cov() + g.mean() * g.mean().transpose()
            })
            .collect();
        let state_term = state_terms.iter().fold(DMatrix::zeros(p, p), |acc, m| acc + m);
        let obs_terms: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> = cfg.exec.try_map_range(t_len, |k| {
            obs_expectations(&traj.marginals[k + 1], &data.batches[k], &ut)
        })?;
        let mut obs_resid = 0.0;
        let mut n_obs = 0.0;
        for ((iv, v, _), batch) in obs_terms.iter().zip(&data.batches) {
            for ((y, a), b) in batch.prices.iter().zip(iv.iter()).zip(v.iter()) {
                obs_resid += y * y - 2.0 * y * a + b;
            }
            n_obs += batch.len() as f64;
        }
        Ok(Self {
            method,
            exec: cfg.exec,
            steps,
            state_term,
            state_terms,
            obs_resid,
            n_obs,
            obs_terms,
            t_len,
            p,
        })
    }

    pub fn steps(&self) -> usize {
        self.t_len
    }

    /// Expected squared price residual summed over all quotes.
    pub fn obs_residual(&self) -> f64 {
        self.obs_resid
    }

    pub fn n_obs(&self) -> f64 {
        self.n_obs
    }

    fn step_eval(&self, st: &PairStep, params: &ReservoirParams, winv: &DMatrix<f64>, want_grad: bool) -> StepEval {
        let p = self.p;
        let c = &params.g_in * &st.drive_in + &params.bias;
        let zs: Vec<DVector<f64>> = st.xs.iter().map(|x| &params.g * x + &c).collect();
        let xi: Vec<DVector<f64>> = zs.iter().map(|z| z.map(logistic)).collect();
        let xi_mean = weighted_mean(&xi, &st.wm);
        let xi_cov = weighted_cross(&xi, &xi_mean, &xi, &xi_mean, &st.wc);
        let y = &xi_cov + &xi_mean * xi_mean.transpose();
        let mut grad_g = DMatrix::zeros(p, p);
        let mut grad_c = DVector::zeros(p);
        match self.method {
            TermIiMethod::JointUt => {
                let y_mean = weighted_mean(&st.ys, &st.wm);
                let ds: Vec<DVector<f64>> = xi.iter().map(|v| v - &xi_mean).collect();
                let es: Vec<DVector<f64>> = st.ys.iter().map(|v| v - &y_mean).collect();
                let mut cxy = DMatrix::zeros(p, p);
                for ((d, e), w) in ds.iter().zip(&es).zip(&st.wc) {
                    cxy.ger(*w, d, e, 1.0);
                }
                let x = cxy + &xi_mean * st.m.transpose();
                if want_grad {
                    let mut e_sum = DVector::zeros(p);
                    let mut d_sum = DVector::zeros(p);
                    for ((d, e), w) in ds.iter().zip(&es).zip(&st.wc) {
                        e_sum.axpy(*w, e, 1.0);
                        d_sum.axpy(*w, d, 1.0);
                    }
                    let h = e_sum - d_sum - &st.m + &xi_mean;
                    for j in 0..xi.len() {
                        let inner = (&ds[j] - &es[j]) * st.wc[j] + &h * st.wm[j];
                        let gj = (winv * inner) * 2.0;
                        let gz = gj.component_mul(&xi[j].map(|s| s * (1.0 - s)));
                        grad_g.ger(1.0, &gz, &st.xs[j], 1.0);
                        grad_c += gz;
                    }
                }
                StepEval {
                    x,
                    y,
                    xi_mean,
                    xi_cov,
                    grad_g,
                    grad_c,
                }
            }
            TermIiMethod::Taylor => {
                let a = &params.g * &st.m_prev + &c;
                let tau = a.map(logistic);
                let q = a.map(logistic_deriv);
                let x = &tau * st.m.transpose() + &st.s_cross * params.g.transpose() * DMatrix::from_diagonal(&q);
                if want_grad {
                    // iii through the θ_{t−1} sigma points
                    let ds: Vec<DVector<f64>> = xi.iter().map(|v| v - &xi_mean).collect();
                    let mut d_sum = DVector::zeros(p);
                    for (d, w) in ds.iter().zip(&st.wc) {
                        d_sum.axpy(*w, d, 1.0);
                    }
                    let h = &xi_mean - d_sum;
                    for j in 0..xi.len() {
                        let inner = &ds[j] * st.wc[j] + &h * st.wm[j];
                        let gj = (winv * inner) * 2.0;
                        let gz = gj.component_mul(&xi[j].map(|s| s * (1.0 - s)));
                        grad_g.ger(1.0, &gz, &st.xs[j], 1.0);
                        grad_c += gz;
                    }
                    // −2 ii
                    let ps = winv * &st.s_cross;
                    let pm = winv * &st.m;
                    let r = DVector::from_fn(p, |k, _| (0..p).map(|l| ps[(k, l)] * params.g[(k, l)]).sum::<f64>());
                    let dq = DVector::from_fn(p, |k, _| q[k] * (1.0 - 2.0 * tau[k]));
                    let dc = DVector::from_fn(p, |k, _| pm[k] * q[k] + dq[k] * r[k]);
                    let dg = DMatrix::from_fn(p, p, |k, l| q[k] * ps[(k, l)] + dc[k] * st.m_prev[l]);
                    grad_g -= dg * 2.0;
                    grad_c -= dc * 2.0;
                }
                StepEval {
                    x,
                    y,
                    xi_mean,
                    xi_cov,
                    grad_g,
                    grad_c,
                }
            }
        }
    }

    /// Smooth loss `f` (negative expected log-likelihood, constants dropped).
    pub fn evaluate(&self, params: &ReservoirParams, want_grad: bool) -> Result<LossEval> {
        let p = self.p;
        if params.state_dim() != p {
            return Err(Error::shape("parameters do not match the E-step dimension"));
        }
        let chol = spd_factor(&params.w)?;
        let winv = symmetrize(&chol.inverse());
        let evals = self
            .exec
            .map(&self.steps, |st| self.step_eval(st, params, &winv, want_grad));
        let mut m = self.state_term.clone();
        for e in &evals {
            m -= &e.x + e.x.transpose();
            m += &e.y;
        }
        let m = symmetrize(&m);
        let t_len = self.t_len as f64;
        let value = 0.5 * t_len * log_det_chol(&chol)
            + 0.5 * (&winv * &m).trace()
            + 0.5 * self.n_obs * params.v.ln()
            + self.obs_resid / (2.0 * params.v);
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        let grad = want_grad.then(|| {
            let mut g = DMatrix::zeros(p, p);
            let mut g_in = DMatrix::zeros(p, params.input_dim());
            let mut bias = DVector::zeros(p);
            for (e, st) in evals.iter().zip(&self.steps) {
                g += &e.grad_g * 0.5;
                g_in.ger(0.5, &e.grad_c, &st.drive_in, 1.0);
                bias.axpy(0.5, &e.grad_c, 1.0);
            }
            let gw = symmetrize(&(&winv * (0.5 * t_len) - &winv * &m * &winv * 0.5));
            let l = chol.l();
            let w_chol = (&gw * &l * 2.0).lower_triangle();
            let log_v = 0.5 * self.n_obs - self.obs_resid / (2.0 * params.v);
            LossGradient {
                g,
                g_in,
                bias,
                w: gw,
                w_chol,
                log_v,
            }
        });
        Ok(LossEval { value, m, grad })
    }

    pub fn loss(&self, params: &ReservoirParams, lasso_alpha: f64) -> Result<f64> {
        Ok(self.evaluate(params, false)?.value + lasso_alpha * params.l1_penalty())
    }

    /// Per-step values of the five expectations at `params`.
    pub fn cache(&self, params: &ReservoirParams) -> Result<EStepCache> {
        let winv = symmetrize(&spd_factor(&params.w)?.inverse());
        let terms = self
            .steps
            .iter()
            .zip(&self.state_terms)
            .zip(&self.obs_terms)
            .map(|((st, s_term), (iv, v, psi_var))| {
                let e = self.step_eval(st, params, &winv, false);
                StepTerms {
                    i: (&winv * s_term).trace(),
                    ii: (&winv * &e.x).trace(),
                    iii: (&winv * &e.y).trace(),
                    iv: iv.clone(),
                    v: v.clone(),
                    xi_mean: e.xi_mean,
                    xi_cov: e.xi_cov,
                    psi_var: psi_var.clone(),
                }
            })
            .collect();
        Ok(EStepCache {
            method: self.method,
            terms,
        })
    }
}

/// Ψ_μ, (Ψ_μ)² + Ψ_Σ and Ψ_Σ of the prices under the smoothed readout law.
fn obs_expectations(
    state: &Gaussian,
    batch: &crate::pricing::ObservationBatch,
    ut: &UtConfig,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let sigma = readout_gaussian(state)?;
    let set = SigmaPointSet::from_moments(sigma.mean(), sigma.cov(), ut)?;
    let ys = set.propagate(|s| batch_unchecked(&batch.specs, clamp_sigma(s[0])))?;
    let mean = set.mean_of(&ys);
    let var = DVector::from_fn(mean.len(), |i, _| {
        set.cov_weights
            .iter()
            .zip(&ys)
            .map(|(w, y)| w * (y[i] - mean[i]).powi(2))
            .sum::<f64>()
            .max(0.0)
    });
    let second = mean.component_mul(&mean) + &var;
    Ok((mean, second, var))
}

/// Expected complete-data log-likelihood over the smoothed trajectory.
pub fn expected_loglik(
    traj: &SmoothedTrajectory,
    params: &ReservoirParams,
    data: &Series,
    cfg: &GemConfig,
) -> Result<(f64, EStepCache)> {
    let obj = MStepObjective::new(traj, data, params, cfg)?;
    let f = obj.evaluate(params, false)?.value;
    Ok((-f, obj.cache(params)?))
}

/// Regularized loss `−E[log L] + α(‖G‖₁ + ‖G_in‖₁)`.
pub fn loss(traj: &SmoothedTrajectory, params: &ReservoirParams, data: &Series, cfg: &GemConfig) -> Result<f64> {
    MStepObjective::new(traj, data, params, cfg)?.loss(params, cfg.lasso_alpha)
}

fn soft_threshold(x: f64, k: f64) -> f64 {
    if x > k {
        x - k
    } else if x < -k {
        x + k
    } else {
        0.0
    }
}

/// One accepted proximal step (or none) on `(G, G_in, b)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MStepOutcome {
    /// Regularized loss before the M-step and after every accepted sub-step.
    pub losses: Vec<f64>,
    pub smooth_losses: Vec<f64>,
    pub step_size: f64,
    pub noise_updated: bool,
}

/// Closed-form minimizer of the loss over `(W, v)` with the rest fixed.
pub fn optimal_noise(obj: &MStepObjective, params: &ReservoirParams, min_var: f64) -> Result<(DMatrix<f64>, f64)> {
    let m = obj.evaluate(params, false)?.m;
    let w = symmetrize(&(m / obj.steps() as f64));
    let eig = nalgebra::SymmetricEigen::new(w);
    let floor = (eig.eigenvalues.max() * EIG_FLOOR).max(min_var);
    let lam = eig.eigenvalues.map(|l| l.max(floor));
    let w = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()));
    let v = (obj.obs_residual() / obj.n_obs()).max(min_var);
    Ok((w, v))
}

/// M-step: optional closed-form noise update, then proximal gradient with
/// backtracking on `(G, G_in, b)`. Every accepted sub-step lowers the
/// regularized loss.
pub fn m_step(obj: &MStepObjective, params: &mut ReservoirParams, step: f64, cfg: &GemConfig) -> Result<MStepOutcome> {
    let alpha = cfg.lasso_alpha;
    let mut cur = obj.evaluate(params, false)?.value;
    let mut losses = vec![cur + alpha * params.l1_penalty()];
    let mut smooth_losses = vec![cur];
    let mut noise_updated = false;
    if cfg.update_noise {
        let (w, v) = optimal_noise(obj, params, cfg.min_variance)?;
        let mut trial = params.clone();
        trial.w = w;
        trial.v = v;
        if let Ok(e) = obj.evaluate(&trial, false) {
            if e.value < cur {
                *params = trial;
                cur = e.value;
                losses.push(cur + alpha * params.l1_penalty());
                smooth_losses.push(cur);
                noise_updated = true;
            }
        }
    }
    let mut t = step;
    for _ in 0..cfg.inner_steps {
        let ev = obj.evaluate(params, true)?;
        let grad = ev.grad.expect("gradient requested");
        let f0 = ev.value;
        let big_f0 = f0 + alpha * params.l1_penalty();
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let mut trial = params.clone();
            trial.g = params.g.zip_map(&grad.g, |x, d| soft_threshold(x - t * d, t * alpha));
            trial.g_in = params
                .g_in
                .zip_map(&grad.g_in, |x, d| soft_threshold(x - t * d, t * alpha));
            trial.bias = &params.bias - &grad.bias * t;
            let dg = &trial.g - &params.g;
            let dgi = &trial.g_in - &params.g_in;
            let db = &trial.bias - &params.bias;
            let lin = grad.g.dot(&dg) + grad.g_in.dot(&dgi) + grad.bias.dot(&db);
            let sq = dg.norm_squared() + dgi.norm_squared() + db.norm_squared();
            if sq == 0.0 {
                break;
            }
            if let Ok(e) = obj.evaluate(&trial, false) {
                let big_f = e.value + alpha * trial.l1_penalty();
                if e.value <= f0 + lin + sq / (2.0 * t) && big_f <= big_f0 {
                    accepted = Some((trial, e.value, big_f));
                    break;
                }
            }
            t *= cfg.backtrack_factor;
        }
        match accepted {
            Some((trial, f, big_f)) => {
                *params = trial;
                losses.push(big_f);
                smooth_losses.push(f);
                t *= cfg.step_growth;
            }
            None => break,
        }
    }
    Ok(MStepOutcome {
        losses,
        smooth_losses,
        step_size: t,
        noise_updated,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub validation_error: f64,
    pub log_evidence: f64,
    /// Regularized loss around the M-step; absent on the final scoring pass.
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub accepted_steps: usize,
    pub step_size: f64,
    pub g_l1: f64,
    pub g_in_l1: f64,
    pub bias_mean: f64,
    pub w_trace: f64,
    pub v: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub term_ii_method: TermIiMethod,
    pub lasso_alpha: f64,
    pub iterations: Vec<IterationRecord>,
    pub best_iteration: usize,
    pub best_validation_error: f64,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct GemFit {
    pub params: ReservoirParams,
    pub initial: Gaussian,
    pub report: FitReport,
}

/// Mean one-step relative price error over `validation`, starting from the
/// filtered belief at the end of training. Falls back to the in-sample
/// one-step errors of the training pass when `validation` is empty.
pub fn validation_error(
    params: &ReservoirParams,
    posterior: &Gaussian,
    validation: &Series,
    in_sample: &[f64],
    ut: &UtConfig,
) -> Result<f64> {
    if validation.is_empty() {
        if in_sample.is_empty() {
            return Ok(f64::NAN);
        }
        return Ok(in_sample.iter().sum::<f64>() / in_sample.len() as f64);
    }
    let model = OptionObservation { v: params.v };
    let mut belief = posterior.clone();
    let mut errs = Vec::with_capacity(validation.len());
    for (u, batch) in validation.inputs.iter().zip(&validation.batches) {
        let f = k_step_predict(
            params,
            &model,
            &belief,
            std::slice::from_ref(u),
            std::slice::from_ref(batch),
            ut,
        )?;
        errs.push(relative_error_step(f[0].obs.mean(), &batch.prices)?);
        let (prior, _) = crate::ssm::predict(params, &belief, u, ut)?;
        belief = update(&model, &prior, batch, ut)?.posterior;
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Loop: filter, smooth, M-step, keeping the parameters with the best
/// validation error.
pub fn gem_fit(
    train: &Series,
    validation: &Series,
    init: &ReservoirParams,
    initial: &Gaussian,
    cfg: &GemConfig,
) -> Result<GemFit> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    init.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training segment is empty".into()));
    }
    if initial.dim() != init.state_dim() {
        return Err(Error::shape("initial belief dimension differs from the reservoir"));
    }
    let mut params = init.clone();
    let mut belief0 = initial.clone();
    let mut best: Option<(f64, ReservoirParams, Gaussian, usize)> = None;
    let mut records = Vec::new();
    let mut step = cfg.initial_step;
    let mut since_best = 0;
    let mut status = "max_iters".to_string();
    let mut prev_loss = f64::INFINITY;
    let mut converged = false;
    for iter in 0..=cfg.max_iters {
        let pass = (|| -> Result<(Vec<crate::ssm::FilterState>, SmoothedTrajectory, f64)> {
            let model = OptionObservation { v: params.v };
            let states = forward_filter(&params, &model, &belief0, &train.inputs, &train.batches, &cfg.ut)?;
            let in_sample: Vec<f64> = states
                .iter()
                .zip(&train.batches)
                .map(|(s, b)| relative_error_step(s.predicted_obs.mean(), &b.prices))
                .collect::<Result<_>>()?;
            let last = &states.last().expect("non-empty").posterior;
            let val = validation_error(&params, last, validation, &in_sample, &cfg.ut)?;
            let traj = rts_smooth(&belief0, &states)?;
            Ok((states, traj, val))
        })();
        let (states, traj, val) = match pass {
            Ok(x) => x,
            Err(e) if best.is_some() && matches!(e, Error::Numerical(_) | Error::NonFinite { .. }) => {
                status = format!("aborted: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let improved = best.as_ref().is_none_or(|b| val < b.0);
        if improved {
            best = Some((val, params.clone(), belief0.clone(), iter));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let log_evidence = crate::ssm::total_log_evidence(&states);
        if iter == cfg.max_iters || converged {
            records.push(record(iter, val, log_evidence, None, None, 0, step, &params));
            break;
        }
        if since_best >= cfg.patience {
            records.push(record(iter, val, log_evidence, None, None, 0, step, &params));
            status = "validation_patience".to_string();
            break;
        }
        let outcome = MStepObjective::new(&traj, train, &params, cfg).and_then(|obj| {
            let mut trial = params.clone();
            let out = m_step(&obj, &mut trial, step, cfg)?;
            Ok((trial, out))
        });
        let (new_params, out) = match outcome {
            Ok(x) => x,
            Err(e) if matches!(e, Error::Numerical(_) | Error::NonFinite { .. }) => {
                status = format!("aborted: {e}");
                records.push(record(iter, val, log_evidence, None, None, 0, step, &params));
                break;
            }
            Err(e) => return Err(e),
        };
        let before = out.losses[0];
        let after = *out.losses.last().expect("non-empty");
        step = out.step_size;
        params = new_params;
        records.push(record(
            iter,
            val,
            log_evidence,
            Some(before),
            Some(after),
            out.losses.len() - 1,
            step,
            &params,
        ));
        if cfg.reset_initial_mean {
            belief0 = Gaussian::new(traj.marginals[0].mean().clone(), initial.cov().clone())?;
        }
        let rel = (prev_loss - after).abs() / after.abs().max(1.0);
        prev_loss = after;
        if rel < cfg.tol || out.losses.len() <= 1 {
            // one more pass scores the final parameters
            status = "converged".to_string();
            converged = true;
        }
    }
    let (best_val, best_params, best_belief, best_iter) = best.expect("at least one pass");
    Ok(GemFit {
        params: best_params,
        initial: best_belief,
        report: FitReport {
            term_ii_method: cfg.term_ii_method,
            lasso_alpha: cfg.lasso_alpha,
            iterations: records,
            best_iteration: best_iter,
            best_validation_error: best_val,
            status,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    iteration: usize,
    validation_error: f64,
    log_evidence: f64,
    loss_before: Option<f64>,
    loss_after: Option<f64>,
    accepted_steps: usize,
    step_size: f64,
    p: &ReservoirParams,
) -> IterationRecord {
    IterationRecord {
        iteration,
        validation_error,
        log_evidence,
        loss_before,
        loss_after,
        accepted_steps,
        step_size,
        g_l1: p.g.iter().map(|x| x.abs()).sum(),
        g_in_l1: p.g_in.iter().map(|x| x.abs()).sum(),
        bias_mean: p.bias.mean(),
        w_trace: p.w.trace(),
        v: p.v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::{init_reservoir, InitConfig};
    use crate::series::initial_belief;
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    fn fixture(p: usize, m: usize, n: usize, seed: u64) -> (Series, ReservoirParams, SmoothedTrajectory, Gaussian) {
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
        let b0 = initial_belief(&data, p, 1e-4).unwrap();
        let model = OptionObservation { v: params.v };
        let ut = UtConfig::default();
        let states = forward_filter(&params, &model, &b0, &data.inputs, &data.batches, &ut).unwrap();
        let traj = rts_smooth(&b0, &states).unwrap();
        (data, params, traj, b0)
    }

    fn perturb(params: &ReservoirParams, which: usize, i: usize, j: usize, h: f64) -> ReservoirParams {
        let mut q = params.clone();
        match which {
            0 => q.g[(i, j)] += h,
            1 => q.g_in[(i, j)] += h,
            _ => q.bias[i] += h,
        }
        q
    }

    fn check_gradient(method: TermIiMethod, ut: UtConfig) {
        let (data, params, traj, _) = fixture(2, 2, 5, 11);
        let cfg = GemConfig {
            term_ii_method: method,
            ut,
            ..GemConfig::default()
        };
        let obj = MStepObjective::new(&traj, &data, &params, &cfg).unwrap();
        let grad = obj.evaluate(&params, true).unwrap().grad.unwrap();
        // Richardson-extrapolated central differences. With α = 1e-3 the
        // sigma-point weights are ~1e5 in magnitude and the loss carries
        // round-off that swamps small steps.
        let h = 8e-3;
        let central = |which, i, j, h: f64| {
            let fp = obj.evaluate(&perturb(&params, which, i, j, h), false).unwrap().value;
            let fm = obj.evaluate(&perturb(&params, which, i, j, -h), false).unwrap().value;
            (fp - fm) / (2.0 * h)
        };
        let mut worst: f64 = 0.0;
        for (which, rows, cols) in [(0, 2, 2), (1, 2, 2), (2, 2, 1)] {
            for i in 0..rows {
                for j in 0..cols {
                    let fd = (4.0 * central(which, i, j, h / 2.0) - central(which, i, j, h)) / 3.0;
                    let an = match which {
                        0 => grad.g[(i, j)],
                        1 => grad.g_in[(i, j)],
                        _ => grad.bias[i],
                    };
                    let rel = (fd - an).abs() / an.abs().max(1e-3);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-5, "{method:?}: worst relative gradient error {worst:e}");
    }

    #[test]
    fn joint_ut_gradient_matches_finite_differences() {
        check_gradient(TermIiMethod::JointUt, UtConfig::default());
        check_gradient(
            TermIiMethod::JointUt,
            UtConfig {
                alpha: 1.0,
                beta: 2.0,
                kappa: 0.0,
            },
        );
    }

    #[test]
    fn taylor_gradient_matches_finite_differences() {
        check_gradient(TermIiMethod::Taylor, UtConfig::default());
        check_gradient(
            TermIiMethod::Taylor,
            UtConfig {
                alpha: 1.0,
                beta: 2.0,
                kappa: 0.0,
            },
        );
    }

    #[test]
    fn noise_gradients_match_finite_differences() {
        let (data, mut params, traj, _) = fixture(2, 2, 5, 4);
        params.w = DMatrix::from_row_slice(2, 2, &[2e-3, 4e-4, 4e-4, 1e-3]);
        let obj = MStepObjective::new(&traj, &data, &params, &GemConfig::default()).unwrap();
        let grad = obj.evaluate(&params, true).unwrap().grad.unwrap();
        let l = spd_factor(&params.w).unwrap().l();
        let h = 1e-8;
        for (i, j) in [(0, 0), (1, 0), (1, 1)] {
            let with = |d: f64| {
                let mut lq = l.clone();
                lq[(i, j)] += d;
                let mut q = params.clone();
                q.w = &lq * lq.transpose();
                obj.evaluate(&q, false).unwrap().value
            };
            let fd = (with(h) - with(-h)) / (2.0 * h);
            let an = grad.w_chol[(i, j)];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "L[{i},{j}] {fd} vs {an}");
        }
        let hv = 1e-6;
        let at = |lv: f64| {
            let mut q = params.clone();
            q.v = lv.exp();
            obj.evaluate(&q, false).unwrap().value
        };
        let lv = params.v.ln();
        let fd = (at(lv + hv) - at(lv - hv)) / (2.0 * hv);
        assert!((fd - grad.log_v).abs() <= 1e-5 * grad.log_v.abs().max(1.0));
    }

    #[test]
    fn point_mass_expectation_equals_path_likelihood() {
        let (data, params, traj, _) = fixture(3, 2, 6, 2);
        let p = params.state_dim();
        let degenerate = SmoothedTrajectory {
            marginals: traj
                .marginals
                .iter()
                .map(|g| Gaussian::point_mass(g.mean().clone()))
                .collect(),
            cross: vec![DMatrix::zeros(p, p); traj.cross.len()],
            gains: traj.gains.clone(),
        };
        let path: Vec<DVector<f64>> = traj.marginals.iter().map(|g| g.mean().clone()).collect();
        let exact = log_likelihood(&path, &params, &data).unwrap();
        for method in [TermIiMethod::JointUt, TermIiMethod::Taylor] {
            let cfg = GemConfig {
                term_ii_method: method,
                ..GemConfig::default()
            };
            let (e, cache) = expected_loglik(&degenerate, &params, &data, &cfg).unwrap();
            assert!(
                (e - exact).abs() <= 1e-10 * exact.abs().max(1.0),
                "{method:?}: {e} vs {exact}"
            );
            assert!(cache.terms.iter().all(|t| t.i >= 0.0 && t.iii >= 0.0));
        }
    }

    #[test]
    fn term_routes_agree_at_small_covariance() {
        let (data, params, traj, _) = fixture(2, 2, 5, 8);
        let winv = spd_factor(&params.w).unwrap().inverse();
        let ut = UtConfig::default();
        for t in 1..=traj.len() {
            let pair = traj.pair(t).unwrap().full().unwrap();
            let scale = 1e-4 / pair.cov().abs().max();
            let small = Gaussian::new(pair.mean().clone(), pair.cov() * scale).unwrap();
            let j = JointGaussian::split(&small, 2).unwrap();
            let a = term_ii_joint_ut(&j, &params, &data.inputs[t - 1], &winv, &ut).unwrap();
            let b = term_ii_taylor(&j, &params, &data.inputs[t - 1], &winv).unwrap();
            assert!((a - b).abs() <= 1e-3 * a.abs(), "step {t}: {a} vs {b}");
        }
    }

    #[test]
    fn accepted_steps_never_raise_the_loss() {
        let (data, params, traj, _) = fixture(3, 2, 12, 5);
        let cfg = GemConfig::default();
        let obj = MStepObjective::new(&traj, &data, &params, &cfg).unwrap();
        let mut q = params.clone();
        let out = m_step(&obj, &mut q, 1.0, &cfg).unwrap();
        assert!(out.losses.len() > 1);
        for w in out.losses.windows(2) {
            assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
        assert_eq!(*out.losses.last().unwrap(), obj.loss(&q, cfg.lasso_alpha).unwrap());
    }

    #[test]
    fn huge_penalty_zeroes_the_weights() {
        let (data, params, traj, _) = fixture(3, 2, 12, 6);
        let cfg = GemConfig {
            lasso_alpha: 1e6,
            inner_steps: 30,
            ..GemConfig::default()
        };
        let obj = MStepObjective::new(&traj, &data, &params, &cfg).unwrap();
        let mut q = params.clone();
        m_step(&obj, &mut q, 1.0, &cfg).unwrap();
        assert!(q.g.iter().all(|x| *x == 0.0));
        assert!(q.g_in.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stationary_point_is_left_unchanged() {
        let (data, params, traj, b0) = fixture(2, 2, 8, 9);
        // point masses on the exact reservoir rollout zero every evolution residual
        let mut path = vec![b0.mean().clone()];
        for u in &data.inputs {
            let next = params.evolve(path.last().unwrap(), u).unwrap();
            path.push(next);
        }
        let rollout = SmoothedTrajectory {
            marginals: path.into_iter().map(Gaussian::point_mass).collect(),
            cross: vec![DMatrix::zeros(2, 2); data.len()],
            gains: traj.gains.clone(),
        };
        let cfg = GemConfig {
            lasso_alpha: 0.0,
            update_noise: false,
            ..GemConfig::default()
        };
        let obj = MStepObjective::new(&rollout, &data, &params, &cfg).unwrap();
        let grad = obj.evaluate(&params, true).unwrap().grad.unwrap();
        assert!(grad.g.amax() < 1e-9 && grad.g_in.amax() < 1e-9 && grad.bias.amax() < 1e-9);
        let mut q = params.clone();
        let out = m_step(&obj, &mut q, 1.0, &cfg).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert_eq!(q, params);
    }

    #[test]
    fn soft_threshold_shrinks_towards_zero() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.0, 1.0), 0.0);
    }

    #[test]
    fn penalty_is_homogeneous() {
        let (data, params, traj, _) = fixture(2, 2, 5, 1);
        let obj = MStepObjective::new(&traj, &data, &params, &GemConfig::default()).unwrap();
        let mut doubled = params.clone();
        doubled.g *= 2.0;
        doubled.g_in *= 2.0;
        let pen = |q: &ReservoirParams| obj.loss(q, 1.0).unwrap() - obj.loss(q, 0.0).unwrap();
        assert!((pen(&doubled) - 2.0 * pen(&params)).abs() < 1e-9 * pen(&params));
        assert_eq!(
            obj.loss(&params, 0.0).unwrap(),
            obj.evaluate(&params, false).unwrap().value
        );
    }

    #[test]
    fn fit_report_round_trips_through_json() {
        let (data, params, _, b0) = fixture(2, 2, 30, 3);
        let (train, val, _) = data.split(1, 4).unwrap();
        let cfg = GemConfig {
            max_iters: 3,
            ..GemConfig::default()
        };
        let fit = gem_fit(&train, &val, &params, &b0, &cfg).unwrap();
        let json = serde_json::to_string(&fit.report).unwrap();
        let back: FitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.iterations.len(), fit.report.iterations.len());
        assert!(fit.report.best_validation_error.is_finite());
    }
}
