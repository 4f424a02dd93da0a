//! Online inference by a joint UKF over the state augmented with the
//! flattened reservoir weights `(θ; G; G_in; b)`, each matrix row-major.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::relative_error_step;
use crate::gaussian::Gaussian;
use crate::pricing::{batch_unchecked, ObservationBatch};
use crate::reservoir::{logistic, readout_gaussian, spectral_radius, ReservoirParams};
use crate::series::Series;
use crate::ssm::{
    clamp_sigma, forward_filter, k_step_predict, predict, rts_smooth, update, Dynamics, FilterState, ObservationModel,
    SmoothedTrajectory,
};
use crate::unscented::UtConfig;

/// Index map of the augmented vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLayout {
    pub p: usize,
    pub m: usize,
}

/// `(θ, G, G_in, b)`.
pub type Unflattened = (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>);

impl AugmentedLayout {
    pub fn new(p: usize, m: usize) -> Self {
        Self { p, m }
    }

    pub fn dim(&self) -> usize {
        self.p + self.p * self.p + self.p * self.m + self.p
    }

    pub fn param_dim(&self) -> usize {
        self.dim() - self.p
    }

    fn g_start(&self) -> usize {
        self.p
    }

    fn g_in_start(&self) -> usize {
        self.p + self.p * self.p
    }

    fn b_start(&self) -> usize {
        self.g_in_start() + self.p * self.m
    }

    pub fn flatten(&self, theta: &DVector<f64>, params: &ReservoirParams) -> Result<DVector<f64>> {
        if theta.len() != self.p || params.state_dim() != self.p || params.input_dim() != self.m {
            return Err(Error::Contract(
                "state or parameters do not fit the augmented layout".into(),
            ));
        }
        let mut x = DVector::zeros(self.dim());
        x.rows_mut(0, self.p).copy_from(theta);
        for i in 0..self.p {
            for j in 0..self.p {
                x[self.g_start() + i * self.p + j] = params.g[(i, j)];
            }
            for j in 0..self.m {
                x[self.g_in_start() + i * self.m + j] = params.g_in[(i, j)];
            }
            x[self.b_start() + i] = params.bias[i];
        }
        Ok(x)
    }

    /// `(θ, G, G_in, b)` from an augmented vector.
    pub fn unflatten(&self, x: &DVector<f64>) -> Result<Unflattened> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "augmented vector of length {} for layout of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let (p, m) = (self.p, self.m);
        let theta = x.rows(0, p).into_owned();
        let g = DMatrix::from_row_slice(p, p, x.rows(self.g_start(), p * p).as_slice());
        let g_in = DMatrix::from_row_slice(p, m, x.rows(self.g_in_start(), p * m).as_slice());
        let b = x.rows(self.b_start(), p).into_owned();
        Ok((theta, g, g_in, b))
    }

    /// Reservoir parameters encoded in `x`, with the given noise levels.
    pub fn params_from(&self, x: &DVector<f64>, template: &ReservoirParams) -> Result<ReservoirParams> {
        let (_, g, g_in, bias) = self.unflatten(x)?;
        Ok(ReservoirParams {
            g,
            g_in,
            bias,
            ..template.clone()
        })
    }

    /// Marginal of the `θ` block.
    pub fn state_marginal(&self, g: &Gaussian) -> Result<Gaussian> {
        Gaussian::new(
            g.mean().rows(0, self.p).into_owned(),
            g.cov().view((0, 0), (self.p, self.p)).into_owned(),
        )
    }
}

/// `θ` evolves with the weights it carries; the weights are copied through.
pub fn augmented_evolve(
    layout: &AugmentedLayout,
    x: &DVector<f64>,
    u: &DVector<f64>,
    input_gain: f64,
) -> Result<DVector<f64>> {
    if x.len() != layout.dim() || u.len() != layout.m {
        return Err(Error::Contract("augmented state or input has the wrong length".into()));
    }
    Ok(evolve_unchecked(layout, x, u, input_gain))
}

fn evolve_unchecked(layout: &AugmentedLayout, x: &DVector<f64>, u: &DVector<f64>, input_gain: f64) -> DVector<f64> {
    let (p, m) = (layout.p, layout.m);
    let mut out = x.clone();
    for i in 0..p {
        let mut z = x[layout.b_start() + i];
        for j in 0..p {
            z += x[layout.g_start() + i * p + j] * x[j];
        }
        for j in 0..m {
            z += x[layout.g_in_start() + i * m + j] * input_gain * u[j] * u[j];
        }
        out[i] = logistic(z);
    }
    out
}

/// Evolution of the augmented vector with noise `blockdiag(W, q I)`.
#[derive(Clone, Debug)]
pub struct AugmentedDynamics {
    pub layout: AugmentedLayout,
    pub input_gain: f64,
    process: DMatrix<f64>,
}

impl AugmentedDynamics {
    pub fn new(layout: AugmentedLayout, w: &DMatrix<f64>, param_innovation_var: f64, input_gain: f64) -> Result<Self> {
        if w.shape() != (layout.p, layout.p) {
            return Err(Error::shape("evolution noise does not match the reservoir dimension"));
        }
        let n = layout.dim();
        let mut process = DMatrix::zeros(n, n);
        process.view_mut((0, 0), (layout.p, layout.p)).copy_from(w);
        for k in layout.p..n {
            process[(k, k)] = param_innovation_var;
        }
        Ok(Self {
            layout,
            input_gain,
            process,
        })
    }
}

impl Dynamics for AugmentedDynamics {
    fn state_dim(&self) -> usize {
        self.layout.dim()
    }

    fn evolve(&self, state: &DVector<f64>, input: &DVector<f64>) -> DVector<f64> {
        evolve_unchecked(&self.layout, state, input, self.input_gain)
    }

    fn process_cov(&self) -> &DMatrix<f64> {
        &self.process
    }
}

/// Option prices read out from the `θ` block only.
#[derive(Clone, Copy, Debug)]
pub struct AugmentedObservation {
    pub p: usize,
    pub v: f64,
}

impl ObservationModel for AugmentedObservation {
    type Obs = ObservationBatch;

    fn measure(&self, state: &DVector<f64>, obs: &ObservationBatch) -> DVector<f64> {
        batch_unchecked(&obs.specs, clamp_sigma(state.rows(0, self.p).mean()))
    }

    fn observed(&self, obs: &ObservationBatch) -> DVector<f64> {
        obs.prices.clone()
    }

    fn noise_var(&self) -> f64 {
        self.v
    }

    fn readout(&self, belief: &Gaussian) -> Result<Gaussian> {
        readout_gaussian(&AugmentedLayout { p: self.p, m: 0 }.state_marginal(belief)?)
    }
}

/// How sigma points are scaled in the augmented space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentedScaling {
    /// Shift κ by `p − dim` so the spread `α²(n + κ)` equals that of the
    /// plain `p`-dimensional filter; a frozen parameter block then
    /// reproduces it exactly.
    Matched,
    /// Use the configured `(α, β, κ)` in the full augmented dimension.
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineConfig {
    /// Diagonal variance added to the parameter block every step.
    pub param_innovation_var: f64,
    /// Prior variance of the parameter block at time 0.
    pub param_prior_var: f64,
    /// Full forward/backward passes over the training data.
    pub max_passes: usize,
    /// Passes without validation improvement before stopping.
    pub patience: usize,
    pub scaling: AugmentedScaling,
    /// Set from the run-level sigma-point settings.
    #[serde(skip)]
    pub ut: UtConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            param_innovation_var: 1e-6,
            param_prior_var: 1e-4,
            max_passes: 5,
            patience: 1,
            scaling: AugmentedScaling::Matched,
            ut: UtConfig::default(),
        }
    }
}

impl OnlineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.param_innovation_var >= 0.0) {
            v.push("online.param_innovation_var must be non-negative".to_string());
        }
        if !(self.param_prior_var >= 0.0) {
            v.push("online.param_prior_var must be non-negative".to_string());
        }
        if self.max_passes == 0 {
            v.push("online.max_passes must be at least 1".to_string());
        }
        if !(self.ut.alpha > 0.0) {
            v.push("ut.alpha must be positive".to_string());
        }
        v
    }

    /// Sigma-point settings for the augmented dimension.
    pub fn augmented_ut(&self, layout: &AugmentedLayout) -> UtConfig {
        match self.scaling {
            AugmentedScaling::Native => self.ut,
            AugmentedScaling::Matched => UtConfig {
                kappa: self.ut.kappa - (layout.dim() - layout.p) as f64,
                ..self.ut
            },
        }
    }
}

/// Prior over the augmented vector: the state belief, and the parameters
/// centred on `params` with isotropic variance.
pub fn augmented_prior(
    layout: &AugmentedLayout,
    state: &Gaussian,
    params: &ReservoirParams,
    param_var: f64,
) -> Result<Gaussian> {
    let mean = layout.flatten(state.mean(), params)?;
    let n = layout.dim();
    let mut cov = DMatrix::zeros(n, n);
    cov.view_mut((0, 0), (layout.p, layout.p)).copy_from(state.cov());
    for k in layout.p..n {
        cov[(k, k)] = param_var;
    }
    Gaussian::new(mean, cov)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    pub validation_error: f64,
    pub log_evidence: f64,
    /// Spectral radius of the filtered parameter-mean `G` at every step.
    pub spectral_radius: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OnlineFit {
    pub layout: AugmentedLayout,
    /// Noise levels and input gain carried over from the initial parameters;
    /// the weights are the filtered means at the end of training.
    pub params: ReservoirParams,
    /// Filtered augmented belief after the last training step.
    pub posterior: Gaussian,
    /// Time-0 belief the best pass started from.
    pub initial: Gaussian,
    pub filtered: Vec<FilterState>,
    pub smoothed: SmoothedTrajectory,
    pub passes: Vec<PassRecord>,
    pub best_pass: usize,
    pub status: String,
}

impl OnlineFit {
    pub fn dynamics(&self, cfg: &OnlineConfig) -> Result<AugmentedDynamics> {
        AugmentedDynamics::new(
            self.layout,
            &self.params.w,
            cfg.param_innovation_var,
            self.params.input_gain,
        )
    }

    pub fn observation(&self) -> AugmentedObservation {
        AugmentedObservation {
            p: self.layout.p,
            v: self.params.v,
        }
    }

    /// Smoothed `(θ_t, G_(t), G_in(t), b_(t))` means for `t = 0..T`.
    pub fn parameter_path(&self) -> Result<Vec<Unflattened>> {
        self.smoothed
            .marginals
            .iter()
            .map(|g| self.layout.unflatten(g.mean()))
            .collect()
    }
}

fn one_step_errors<D: Dynamics, M: ObservationModel<Obs = ObservationBatch>>(
    dynamics: &D,
    model: &M,
    posterior: &Gaussian,
    data: &Series,
    ut: &UtConfig,
) -> Result<Vec<f64>> {
    let mut belief = posterior.clone();
    let mut errs = Vec::with_capacity(data.len());
    for (u, batch) in data.inputs.iter().zip(&data.batches) {
        let f = k_step_predict(
            dynamics,
            model,
            &belief,
            std::slice::from_ref(u),
            std::slice::from_ref(batch),
            ut,
        )?;
        errs.push(relative_error_step(f[0].obs.mean(), &batch.prices)?);
        let (prior, _) = predict(dynamics, &belief, u, ut)?;
        belief = update(model, &prior, batch, ut)?.posterior;
    }
    Ok(errs)
}

/// Joint-UKF fit: filter the augmented state over `train`, smooth it, reset
/// the time-0 belief to the smoothed one and repeat while the validation
/// error improves.
pub fn online_fit(
    train: &Series,
    validation: &Series,
    init: &ReservoirParams,
    initial_state: &Gaussian,
    cfg: &OnlineConfig,
) -> Result<OnlineFit> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    init.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training segment is empty".into()));
    }
    let layout = AugmentedLayout::new(init.state_dim(), init.input_dim());
    if train.input_dim() != layout.m {
        return Err(Error::shape("input dimension differs from the reservoir"));
    }
    let dynamics = AugmentedDynamics::new(layout, &init.w, cfg.param_innovation_var, init.input_gain)?;
    let model = AugmentedObservation { p: layout.p, v: init.v };
    let ut = cfg.augmented_ut(&layout);
    let mut belief0 = augmented_prior(&layout, initial_state, init, cfg.param_prior_var)?;
    let mut best: Option<(f64, OnlineFit)> = None;
    let mut passes = Vec::new();
    let mut since_best = 0;
    let mut status = "max_passes".to_string();
    for pass in 0..cfg.max_passes {
        let run = (|| -> Result<(Vec<FilterState>, SmoothedTrajectory, f64)> {
            let states = forward_filter(&dynamics, &model, &belief0, &train.inputs, &train.batches, &ut)?;
            let last = &states.last().expect("non-empty").posterior;
            let val = if validation.is_empty() {
                let errs: Vec<f64> = states
                    .iter()
                    .zip(&train.batches)
                    .map(|(s, b)| relative_error_step(s.predicted_obs.mean(), &b.prices))
                    .collect::<Result<_>>()?;
                errs.iter().sum::<f64>() / errs.len() as f64
            } else {
                let errs = one_step_errors(&dynamics, &model, last, validation, &ut)?;
                errs.iter().sum::<f64>() / errs.len() as f64
            };
            let smoothed = rts_smooth(&belief0, &states)?;
            Ok((states, smoothed, val))
        })();
        let (states, smoothed, val) = match run {
            Ok(x) => x,
            Err(e) if best.is_some() && matches!(e, Error::Numerical(_) | Error::NonFinite { .. }) => {
                status = format!("aborted: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        let radii = states
            .iter()
            .map(|s| {
                let (_, g, _, _) = layout.unflatten(s.posterior.mean())?;
                spectral_radius(&g)
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(r) = radii.last() {
            log::debug!("online pass {pass}: validation {val:.6}, final spectral radius {r:.4}");
        }
        passes.push(PassRecord {
            pass,
            validation_error: val,
            log_evidence: crate::ssm::total_log_evidence(&states),
            spectral_radius: radii,
        });
        let posterior = states.last().expect("non-empty").posterior.clone();
        let params = layout.params_from(posterior.mean(), init)?;
        let next0 = smoothed.marginals[0].clone();
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((
                val,
                OnlineFit {
                    layout,
                    params,
                    posterior,
                    initial: belief0.clone(),
                    filtered: states,
                    smoothed,
                    passes: Vec::new(),
                    best_pass: pass,
                    status: String::new(),
                },
            ));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                status = "validation_patience".to_string();
                break;
            }
        }
        // restart from the smoothed time-0 belief
        belief0 = next0;
    }
    let (_, mut fit) = best.expect("at least one pass");
    fit.passes = passes;
    fit.status = status;
    Ok(fit)
}
