//! Unscented forward filter, unscented RTS smoother and k-step predictive
//! rollouts, generic over the evolution and measurement maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, JointGaussian};
use crate::linalg::{log_det_chol, repair_cov, right_solve_spd, spd_factor};
use crate::pricing::{batch_unchecked, ObservationBatch};
use crate::reservoir::{readout_gaussian, ReservoirParams};
use crate::unscented::{augmented_transform, sigma_points, UtConfig};

/// Readout values are clipped into this range before pricing.
pub const SIGMA_CLAMP: (f64, f64) = (1e-4, 0.9999);

/// State evolution `x_t = f(x_{t−1}, u_t) + w_t`.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn evolve(&self, state: &DVector<f64>, input: &DVector<f64>) -> DVector<f64>;
    fn process_cov(&self) -> &DMatrix<f64>;
}

/// Measurement `y_t = h(x_t; o_t) + ν_t` with isotropic noise variance.
pub trait ObservationModel: Sync {
    type Obs: Sync;
    fn measure(&self, state: &DVector<f64>, obs: &Self::Obs) -> DVector<f64>;
    fn observed(&self, obs: &Self::Obs) -> DVector<f64>;
    fn noise_var(&self) -> f64;
    /// Law of the scalar volatility readout under a state belief.
    fn readout(&self, belief: &Gaussian) -> Result<Gaussian> {
        readout_gaussian(belief)
    }
}

impl Dynamics for ReservoirParams {
    fn state_dim(&self) -> usize {
        ReservoirParams::state_dim(self)
    }

    fn evolve(&self, state: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        self.evolve_with_drive(state, &self.drive(input))
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Option prices through the readout: `BS(p, r, clamp(mean θ), T, K)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionObservation {
    pub v: f64,
}

pub fn clamp_sigma(s: f64) -> f64 {
    s.clamp(SIGMA_CLAMP.0, SIGMA_CLAMP.1)
}

impl ObservationModel for OptionObservation {
    type Obs = ObservationBatch;

    fn measure(&self, state: &DVector<f64>, obs: &ObservationBatch) -> DVector<f64> {
        batch_unchecked(&obs.specs, clamp_sigma(state.mean()))
    }

    fn observed(&self, obs: &ObservationBatch) -> DVector<f64> {
        obs.prices.clone()
    }

    fn noise_var(&self) -> f64 {
        self.v
    }
}

/// Affine evolution hook `A x + B u + c`.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub w: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn evolve(&self, state: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        &self.a * state + &self.b * input + &self.c
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Identity evolution with additive noise.
#[derive(Clone, Debug)]
pub struct IdentityDynamics {
    pub w: DMatrix<f64>,
}

impl Dynamics for IdentityDynamics {
    fn state_dim(&self) -> usize {
        self.w.nrows()
    }

    fn evolve(&self, state: &DVector<f64>, _input: &DVector<f64>) -> DVector<f64> {
        state.clone()
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.w
    }
}

/// Affine measurement hook `H x + d`.
#[derive(Clone, Debug)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub v: f64,
}

impl ObservationModel for LinearObservation {
    type Obs = DVector<f64>;

    fn measure(&self, state: &DVector<f64>, _obs: &DVector<f64>) -> DVector<f64> {
        &self.h * state + &self.d
    }

    fn observed(&self, obs: &DVector<f64>) -> DVector<f64> {
        obs.clone()
    }

    fn noise_var(&self) -> f64 {
        self.v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub prior: Gaussian,
    pub posterior: Gaussian,
    /// Cov(θ_{t−1} | D_{t−1}, θ_t | D_{t−1}) from the predict step.
    pub cross_prev: DMatrix<f64>,
    pub log_evidence_increment: f64,
    pub predicted_obs: Gaussian,
}

/// One-step prior and the cross-covariance between the input posterior and it.
pub fn predict<D: Dynamics + ?Sized>(
    dynamics: &D,
    posterior: &Gaussian,
    input: &DVector<f64>,
    cfg: &UtConfig,
) -> Result<(Gaussian, DMatrix<f64>)> {
    let n = dynamics.state_dim();
    if posterior.dim() != n {
        return Err(Error::shape(format!(
            "posterior of dimension {} for a state of dimension {n}",
            posterior.dim()
        )));
    }
    let j = augmented_transform(posterior, |x| dynamics.evolve(x, input), cfg)?;
    let (mean, cov) = j.second.into_parts();
    let prior = Gaussian::new(mean, cov + dynamics.process_cov())?;
    Ok((prior, j.cross))
}

/// Predictive moments of a measurement: `(ŷ, Ψ_Σ, C_xy)`.
pub fn measurement_moments<M: ObservationModel + ?Sized>(
    model: &M,
    prior: &Gaussian,
    obs: &M::Obs,
    cfg: &UtConfig,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let set = sigma_points(prior, cfg)?;
    let ys = set.propagate(|x| model.measure(x, obs))?;
    let y_mean = set.mean_of(&ys);
    let y_cov = set.cov_of(&ys, &y_mean);
    let cross = set.cross_of(&set.points, prior.mean(), &ys, &y_mean);
    Ok((y_mean, y_cov, cross))
}

#[derive(Clone, Debug)]
pub struct UpdateResult {
    pub posterior: Gaussian,
    pub predicted_obs: Gaussian,
    pub log_evidence_increment: f64,
}

/// Sigma-point (UKF) measurement update.
pub fn update<M: ObservationModel + ?Sized>(
    model: &M,
    prior: &Gaussian,
    obs: &M::Obs,
    cfg: &UtConfig,
) -> Result<UpdateResult> {
    let y = model.observed(obs);
    let (y_mean, y_cov, cross) = measurement_moments(model, prior, obs, cfg)?;
    if y.len() != y_mean.len() {
        return Err(Error::shape("observation length differs from measurement output"));
    }
    let i = y.len();
    let s = repair_cov(&(y_cov + DMatrix::identity(i, i) * model.noise_var()));
    let chol = spd_factor(&s)?;
    let innov = &y - &y_mean;
    let gain = chol.solve(&cross.transpose()).transpose();
    let mean = prior.mean() + &gain * &innov;
    let cov = prior.cov() - &gain * cross.transpose();
    let z = chol.solve(&innov);
    let log_ev = -0.5 * (innov.dot(&z) + log_det_chol(&chol) + i as f64 * (2.0 * std::f64::consts::PI).ln());
    Ok(UpdateResult {
        posterior: Gaussian::new(mean, cov)?,
        predicted_obs: Gaussian::new(y_mean, s)?,
        log_evidence_increment: log_ev,
    })
}

/// Alternating predict/update over `t = 1..T`. The initial belief is not
/// part of the output.
pub fn forward_filter<D, M>(
    dynamics: &D,
    model: &M,
    initial: &Gaussian,
    inputs: &[DVector<f64>],
    observations: &[M::Obs],
    cfg: &UtConfig,
) -> Result<Vec<FilterState>>
where
    D: Dynamics + ?Sized,
    M: ObservationModel + ?Sized,
{
    if inputs.len() != observations.len() {
        return Err(Error::shape(format!(
            "{} inputs but {} observations",
            inputs.len(),
            observations.len()
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    let mut belief = initial.clone();
    for (u, obs) in inputs.iter().zip(observations) {
        let (prior, cross_prev) = predict(dynamics, &belief, u, cfg)?;
        let up = update(model, &prior, obs, cfg)?;
        belief = up.posterior.clone();
        out.push(FilterState {
            prior,
            posterior: up.posterior,
            cross_prev,
            log_evidence_increment: up.log_evidence_increment,
            predicted_obs: up.predicted_obs,
        });
    }
    Ok(out)
}

pub fn total_log_evidence(states: &[FilterState]) -> f64 {
    states.iter().map(|s| s.log_evidence_increment).sum()
}

/// Smoothed marginals for `t = 0..T` and consecutive cross-covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedTrajectory {
    pub marginals: Vec<Gaussian>,
    /// `cross[t] = Cov(θ_t, θ_{t+1} | D_T)`.
    pub cross: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl SmoothedTrajectory {
    pub fn len(&self) -> usize {
        self.cross.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cross.is_empty()
    }

    /// Joint of `(θ_{t−1}, θ_t) | D_T` for `t = 1..T`.
    pub fn pair(&self, t: usize) -> Result<JointGaussian> {
        if t == 0 || t > self.cross.len() {
            return Err(Error::Contract(format!("no smoothed pair ending at step {t}")));
        }
        JointGaussian::new(
            self.marginals[t - 1].clone(),
            self.marginals[t].clone(),
            self.cross[t - 1].clone(),
        )
    }
}

/// Unscented RTS backward pass.
pub fn rts_smooth(initial: &Gaussian, states: &[FilterState]) -> Result<SmoothedTrajectory> {
    let n = states.len();
    if n == 0 {
        return Err(Error::Contract("smoothing needs a non-empty filter pass".into()));
    }
    let mut marginals = vec![states[n - 1].posterior.clone()];
    let mut cross = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    for t in (0..n).rev() {
        let filtered = if t == 0 { initial } else { &states[t - 1].posterior };
        let next = &states[t];
        let smoothed_next = marginals.last().expect("non-empty");
        let gain = right_solve_spd(&next.cross_prev, next.prior.cov())?;
        let mean = filtered.mean() + &gain * (smoothed_next.mean() - next.prior.mean());
        let cov = filtered.cov() + &gain * (smoothed_next.cov() - next.prior.cov()) * gain.transpose();
        let pair_cross = &gain * smoothed_next.cov();
        marginals.push(Gaussian::new(mean, cov)?);
        cross.push(pair_cross);
        gains.push(gain);
    }
    marginals.reverse();
    cross.reverse();
    gains.reverse();
    Ok(SmoothedTrajectory {
        marginals,
        cross,
        gains,
    })
}

/// Predictive laws at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepForecast {
    pub state: Gaussian,
    pub sigma: Gaussian,
    pub obs: Gaussian,
}

/// Rolls the belief forward `k` steps without measurement updates.
pub fn k_step_predict<D, M>(
    dynamics: &D,
    model: &M,
    posterior: &Gaussian,
    future_inputs: &[DVector<f64>],
    future_obs: &[M::Obs],
    cfg: &UtConfig,
) -> Result<Vec<StepForecast>>
where
    D: Dynamics + ?Sized,
    M: ObservationModel + ?Sized,
{
    if future_inputs.is_empty() || future_inputs.len() != future_obs.len() {
        return Err(Error::Contract(format!(
            "k-step prediction needs k >= 1 matching inputs and specs (got {} and {})",
            future_inputs.len(),
            future_obs.len()
        )));
    }
    let mut belief = posterior.clone();
    let mut out = Vec::with_capacity(future_inputs.len());
    for (u, obs) in future_inputs.iter().zip(future_obs) {
        let (prior, _) = predict(dynamics, &belief, u, cfg)?;
        let (y_mean, y_cov, _) = measurement_moments(model, &prior, obs, cfg)?;
        let i = y_mean.len();
        let obs_law = Gaussian::new(y_mean, y_cov + DMatrix::identity(i, i) * model.noise_var())?;
        out.push(StepForecast {
            sigma: model.readout(&prior)?,
            state: prior.clone(),
            obs: obs_law,
        });
        belief = prior;
    }
    Ok(out)
}
