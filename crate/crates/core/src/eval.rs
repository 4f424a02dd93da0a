//! Rolling-origin k-step evaluation, relative price error and coverage of
//! central predictive intervals.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::pricing::{batch_unchecked, norm_cdf, ObservationBatch};
use crate::series::Series;
use crate::ssm::{k_step_predict, predict, update, Dynamics, ObservationModel};
use crate::unscented::UtConfig;

pub const DEFAULT_HORIZONS: [usize; 5] = [1, 5, 10, 15, 20];

/// `(1/I) Σ |ŷ − y| / y`.
pub fn relative_error_step(predicted: &DVector<f64>, realized: &DVector<f64>) -> Result<f64> {
    if predicted.len() != realized.len() || realized.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} realized prices",
            predicted.len(),
            realized.len()
        )));
    }
    if realized.iter().any(|y| !(*y > 0.0)) {
        return Err(Error::Domain(
            "relative error needs strictly positive realized prices".into(),
        ));
    }
    let total: f64 = predicted
        .iter()
        .zip(realized.iter())
        .map(|(a, y)| (a - y).abs() / y)
        .sum();
    Ok(total / realized.len() as f64)
}

/// Standard normal quantile by bisection on the CDF (exact to double precision).
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * mid.abs().max(1e-300) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Half-width multiplier of a central interval with the given nominal mass.
pub fn central_z(level: f64) -> f64 {
    norm_quantile(0.5 + 0.5 * level)
}

/// Default nominal levels 0.05, 0.10, …, 0.95.
pub fn default_levels() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// Predictive summary at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub price_mean: DVector<f64>,
    pub price_var: DVector<f64>,
    pub sigma_mean: f64,
    pub sigma_var: f64,
}

/// A model handle driven by the evaluation protocol. Parameters are never
/// touched; only beliefs flow through `assimilate`.
pub trait SequentialForecaster: Sync {
    type Belief: Clone + Send + Sync;

    fn name(&self) -> String;

    /// Belief conditioned on the training segment.
    fn start(&self) -> Result<Self::Belief>;

    fn assimilate(&self, belief: &Self::Belief, input: &DVector<f64>, batch: &ObservationBatch)
        -> Result<Self::Belief>;

    fn forecast(
        &self,
        belief: &Self::Belief,
        inputs: &[DVector<f64>],
        batches: &[ObservationBatch],
    ) -> Result<Vec<Forecast>>;
}

/// Any unscented filter model (offline or augmented online).
pub struct FilterForecaster<'a, D: ?Sized, M: ?Sized> {
    pub label: String,
    pub dynamics: &'a D,
    pub model: &'a M,
    pub start_belief: Gaussian,
    pub ut: UtConfig,
}

impl<D, M> SequentialForecaster for FilterForecaster<'_, D, M>
where
    D: Dynamics + ?Sized,
    M: ObservationModel<Obs = ObservationBatch> + ?Sized,
{
    type Belief = Gaussian;

    fn name(&self) -> String {
        self.label.clone()
    }

    fn start(&self) -> Result<Gaussian> {
        Ok(self.start_belief.clone())
    }

    fn assimilate(&self, belief: &Gaussian, input: &DVector<f64>, batch: &ObservationBatch) -> Result<Gaussian> {
        let (prior, _) = predict(self.dynamics, belief, input, &self.ut)?;
        Ok(update(self.model, &prior, batch, &self.ut)?.posterior)
    }

    fn forecast(
        &self,
        belief: &Gaussian,
        inputs: &[DVector<f64>],
        batches: &[ObservationBatch],
    ) -> Result<Vec<Forecast>> {
        let steps = k_step_predict(self.dynamics, self.model, belief, inputs, batches, &self.ut)?;
        Ok(steps
            .into_iter()
            .map(|s| Forecast {
                price_mean: s.obs.mean().clone(),
                price_var: s.obs.cov().diagonal(),
                sigma_mean: s.sigma.mean()[0],
                sigma_var: s.sigma.cov()[(0, 0)],
            })
            .collect())
    }
}

/// Calibrated implied-volatility baseline: the latest mean implied
/// volatility is carried forward as the forecast; its cross-sectional
/// dispersion sets the predictive width.
pub struct ImpliedVolBaseline {
    pub start_sigma: f64,
    pub start_var: f64,
}

impl ImpliedVolBaseline {
    pub fn from_batch(batch: &ObservationBatch) -> Result<Self> {
        let (s, v) = iv_moments(batch)?;
        Ok(Self {
            start_sigma: s,
            start_var: v,
        })
    }
}

fn iv_moments(batch: &ObservationBatch) -> Result<(f64, f64)> {
    let vols: Vec<f64> = batch
        .specs
        .iter()
        .zip(batch.prices.iter())
        .filter_map(|(s, p)| crate::pricing::implied_vol(s, *p).ok())
        .collect();
    if vols.is_empty() {
        return Err(Error::Numerical(
            "no invertible quote for the implied-volatility baseline".into(),
        ));
    }
    let n = vols.len() as f64;
    let mean = vols.iter().sum::<f64>() / n;
    let var = if vols.len() > 1 {
        vols.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var))
}

impl SequentialForecaster for ImpliedVolBaseline {
    type Belief = (f64, f64);

    fn name(&self) -> String {
        "implied_vol".to_string()
    }

    fn start(&self) -> Result<(f64, f64)> {
        Ok((self.start_sigma, self.start_var))
    }

    fn assimilate(&self, belief: &(f64, f64), _input: &DVector<f64>, batch: &ObservationBatch) -> Result<(f64, f64)> {
        Ok(iv_moments(batch).unwrap_or(*belief))
    }

    fn forecast(
        &self,
        belief: &(f64, f64),
        _inputs: &[DVector<f64>],
        batches: &[ObservationBatch],
    ) -> Result<Vec<Forecast>> {
        let (sigma, var) = *belief;
        let sd = var.sqrt();
        Ok(batches
            .iter()
            .map(|b| {
                let mid = batch_unchecked(&b.specs, sigma);
                let up = batch_unchecked(&b.specs, sigma + sd.max(1e-8));
                let slope = (&up - &mid) / sd.max(1e-8);
                Forecast {
                    price_var: slope.map(|s| s * s * var),
                    price_mean: mid,
                    sigma_mean: sigma,
                    sigma_var: var,
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub origin_t: usize,
    pub horizon: usize,
    pub predicted: DVector<f64>,
    pub predicted_var: DVector<f64>,
    pub sigma_mean: f64,
    pub sigma_var: f64,
    pub realized: DVector<f64>,
    pub truth: Option<f64>,
    pub rel_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageTarget {
    /// Predictive σ interval against the ground-truth volatility.
    Volatility,
    /// Predictive price intervals against realized prices.
    Price,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub target: CoverageTarget,
    pub levels: Vec<f64>,
    pub horizons: Vec<usize>,
    /// `observed[h][l]` for horizon index `h` and level index `l`.
    pub observed: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl CoverageCurve {
    pub fn at(&self, horizon: usize, level: f64) -> Option<f64> {
        let h = self.horizons.iter().position(|&k| k == horizon)?;
        let l = self.levels.iter().position(|&x| (x - level).abs() < 1e-9)?;
        Some(self.observed[h][l])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub horizons: Vec<usize>,
    /// Mean relative error per horizon (average over origins).
    pub mean_errors: Vec<f64>,
    pub per_origin: Vec<Vec<f64>>,
    pub validation_errors: Vec<f64>,
    pub coverage: CoverageCurve,
    pub records: Vec<ForecastRecord>,
}

impl EvalResult {
    pub fn error_at(&self, horizon: usize) -> Option<f64> {
        let h = self.horizons.iter().position(|&k| k == horizon)?;
        Some(self.mean_errors[h])
    }
}

fn covered(value: f64, mean: f64, var: f64, z: f64) -> bool {
    if !z.is_finite() {
        return true;
    }
    (value - mean).abs() <= z * var.max(0.0).sqrt()
}

/// Rolling-origin protocol. `series` is the full series; the model's start
/// belief must be conditioned on its first `train_len` elements. Validation
/// steps are assimilated (with one-step errors recorded), then for every
/// origin the model forecasts without updates, the errors are recorded, and
/// the next observation is assimilated.
pub fn rolling_k_step_eval<F: SequentialForecaster + ?Sized>(
    model: &F,
    series: &Series,
    train_len: usize,
    validation_len: usize,
    horizons: &[usize],
    levels: &[f64],
) -> Result<EvalResult> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::Contract(
            "horizons must be a non-empty set of positive steps".into(),
        ));
    }
    let mut horizons = horizons.to_vec();
    horizons.sort_unstable();
    horizons.dedup();
    let max_h = *horizons.last().expect("non-empty");
    let min_h = horizons[0];
    let n = series.len();
    let first_origin = train_len + validation_len;
    if first_origin + max_h > n {
        return Err(Error::Contract(format!(
            "test segment of {} steps is shorter than the largest horizon {max_h}",
            n.saturating_sub(first_origin)
        )));
    }
    if levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
        return Err(Error::Contract("nominal levels must lie in (0, 1]".into()));
    }
    let target = if series.truth.is_some() {
        CoverageTarget::Volatility
    } else {
        CoverageTarget::Price
    };
    let zs: Vec<f64> = levels.iter().map(|l| central_z(*l)).collect();

    let mut belief = model.start()?;
    let mut validation_errors = Vec::with_capacity(validation_len);
    for k in train_len..first_origin {
        let f = model.forecast(&belief, &series.inputs[k..=k], &series.batches[k..=k])?;
        validation_errors.push(relative_error_step(&f[0].price_mean, &series.batches[k].prices)?);
        belief = model.assimilate(&belief, &series.inputs[k], &series.batches[k])?;
    }

    let mut per_origin = vec![Vec::new(); horizons.len()];
    let mut hits = vec![vec![0usize; levels.len()]; horizons.len()];
    let mut counts = vec![0usize; horizons.len()];
    let mut records = Vec::new();
    let mut origin = first_origin;
    while origin + min_h <= n {
        let k_avail = max_h.min(n - origin);
        let f = model.forecast(
            &belief,
            &series.inputs[origin..origin + k_avail],
            &series.batches[origin..origin + k_avail],
        )?;
        for (hi, &h) in horizons.iter().enumerate() {
            if h > k_avail {
                continue;
            }
            let fc = &f[h - 1];
            let idx = origin + h - 1;
            let realized = &series.batches[idx].prices;
            let err = relative_error_step(&fc.price_mean, realized)?;
            per_origin[hi].push(err);
            let truth = series.truth.as_ref().map(|t| t[idx]);
            match truth {
                Some(v) => {
                    counts[hi] += 1;
                    for (li, z) in zs.iter().enumerate() {
                        if covered(v, fc.sigma_mean, fc.sigma_var, *z) {
                            hits[hi][li] += 1;
                        }
                    }
                }
                None => {
                    counts[hi] += realized.len();
                    for (li, z) in zs.iter().enumerate() {
                        hits[hi][li] += realized
                            .iter()
                            .zip(fc.price_mean.iter())
                            .zip(fc.price_var.iter())
                            .filter(|((y, m), v)| covered(**y, **m, **v, *z))
                            .count();
                    }
                }
            }
            records.push(ForecastRecord {
                origin_t: origin,
                horizon: h,
                predicted: fc.price_mean.clone(),
                predicted_var: fc.price_var.clone(),
                sigma_mean: fc.sigma_mean,
                sigma_var: fc.sigma_var,
                realized: realized.clone(),
                truth,
                rel_error: err,
            });
        }
        if origin >= n {
            break;
        }
        belief = model.assimilate(&belief, &series.inputs[origin], &series.batches[origin])?;
        origin += 1;
    }
    let mean_errors = per_origin
        .iter()
        .map(|e| e.iter().sum::<f64>() / e.len() as f64)
        .collect();
    let observed = hits
        .iter()
        .zip(&counts)
        .map(|(row, &c)| row.iter().map(|&h| h as f64 / c as f64).collect())
        .collect();
    Ok(EvalResult {
        model: model.name(),
        horizons: horizons.clone(),
        mean_errors,
        per_origin,
        validation_errors,
        coverage: CoverageCurve {
            target,
            levels: levels.to_vec(),
            horizons,
            observed,
            counts,
        },
        records,
    })
}

/// `horizon,mean_rel_error` rows.
pub fn write_results_csv(path: &Path, result: &EvalResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "mean_rel_error"])?;
    for (h, e) in result.horizons.iter().zip(&result.mean_errors) {
        w.write_record([h.to_string(), format!("{e:.10}")])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per model with a column per horizon (`k=1`, `k=5`, …).
pub fn write_table_csv(path: &Path, rows: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let horizons = rows.first().map(|r| r.1.clone()).unwrap_or_default();
    let header: Vec<String> = std::iter::once("model".to_string())
        .chain(horizons.iter().map(|h| format!("k={h}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (name, hs, errs) in rows {
        if *hs != horizons {
            return Err(Error::Contract("table rows use different horizon sets".into()));
        }
        let cells: Vec<String> = errs.iter().map(|e| format!("{e:.6}")).collect();
        writeln!(f, "{},{}", name, cells.join(","))?;
    }
    Ok(())
}

/// `nominal,observed,horizon` rows.
pub fn write_coverage_csv(path: &Path, curve: &CoverageCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["nominal", "observed", "horizon"])?;
    for (hi, h) in curve.horizons.iter().enumerate() {
        for (li, l) in curve.levels.iter().enumerate() {
            w.write_record([
                format!("{l:.2}"),
                format!("{:.6}", curve.observed[hi][li]),
                h.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
