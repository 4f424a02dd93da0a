//! Command bodies: each reads a resolved [`RunConfig`], runs one stage and
//! writes its artifacts (plus the resolved config) into an output directory.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    rolling_k_step_eval, write_coverage_csv, write_results_csv, write_table_csv, CoverageTarget, EvalResult,
    FilterForecaster, Forecast, ImpliedVolBaseline, SequentialForecaster,
};
use crate::gaussian::Gaussian;
use crate::gem::{gem_fit, FitReport};
use crate::io::{read_json, trajectory_rows, write_forecast_csv, write_json, write_trajectory_csv};
use crate::market::{export_market, ingest, IngestReport, MarketPaths};
use crate::online::{online_fit, AugmentedDynamics, AugmentedLayout, AugmentedObservation, PassRecord};
use crate::par::Exec;
use crate::pricing::ObservationBatch;
use crate::reservoir::{init_reservoir, ReservoirParams};
use crate::series::{initial_belief, Series};
use crate::ssm::{forward_filter, rts_smooth, Dynamics, ObservationModel, OptionObservation};
use crate::synthetic::{generate_dataset, SyntheticDataset};
use crate::unscented::UtConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Where a run's series came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Generated in memory from the synthetic settings and seed.
    Generated,
    Bundle {
        dir: PathBuf,
    },
    Market {
        report: IngestReport,
    },
}

#[derive(Clone, Debug)]
pub struct LoadedData {
    pub series: Series,
    pub dates: Option<Vec<NaiveDate>>,
    pub source: DataSource,
}

/// Synthetic bundle if configured, else the three market tables, else a
/// dataset generated from the synthetic settings.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let d = &cfg.data;
    let m = cfg.reservoir.m;
    if let Some(dir) = &d.dataset {
        let data = SyntheticDataset::import(dir)?;
        return Ok(LoadedData {
            series: data.to_series(m)?,
            dates: None,
            source: DataSource::Bundle { dir: dir.clone() },
        });
    }
    let given = [
        ("data.options", &d.options),
        ("data.spot", &d.spot),
        ("data.rates", &d.rates),
    ];
    if given.iter().any(|(_, p)| p.is_some()) {
        let missing: Vec<String> = given
            .iter()
            .filter(|(_, p)| p.is_none())
            .map(|(k, _)| format!("{k} is required when any market table is given"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(missing));
        }
        let paths = MarketPaths {
            options: d.options.clone().expect("checked"),
            spot: d.spot.clone().expect("checked"),
            rates: d.rates.clone().expect("checked"),
        };
        let ms = ingest(&paths, d.top_i, m)?;
        return Ok(LoadedData {
            series: ms.series,
            dates: Some(ms.dates),
            source: DataSource::Market { report: ms.report },
        });
    }
    let data = generate_dataset(&cfg.synthetic)?;
    Ok(LoadedData {
        series: data.to_series(m)?,
        dates: None,
        source: DataSource::Generated,
    })
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub dataset_dir: PathBuf,
    pub market: MarketPaths,
    pub n: usize,
    pub kappa_v: f64,
}

/// Writes the synthetic bundle to `out/dataset` and the same data in the
/// market schema to `out/market`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    let cfg = cfg.resolved()?;
    prepare_out(out, &cfg)?;
    let data = generate_dataset(&cfg.synthetic)?;
    let dataset_dir = out.join("dataset");
    std::fs::create_dir_all(&dataset_dir)?;
    data.export(&dataset_dir)?;
    let market_dir = out.join("market");
    std::fs::create_dir_all(&market_dir)?;
    let market = export_market(&data, &market_dir, &cfg.fixture)?;
    info!("simulated {} steps into {}", data.len(), out.display());
    Ok(SimulateSummary {
        dataset_dir,
        market,
        n: data.len(),
        kappa_v: cfg.synthetic.kappa_v,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Offline,
    Online,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingReport {
    Offline(FitReport),
    Online {
        passes: Vec<PassRecord>,
        best_pass: usize,
        status: String,
    },
}

/// Everything needed to rebuild the frozen model and replay the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub seed: u64,
    pub params: ReservoirParams,
    /// Time-0 belief (augmented with the parameter block for online runs).
    pub initial: Gaussian,
    pub train_len: usize,
    pub validation_len: usize,
    pub test_len: usize,
    pub report: TrainingReport,
    /// Where the training series came from; absent for in-memory fits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_source: Option<DataSource>,
    pub config: RunConfig,
}

/// A rebuilt model: dynamics, observation model and sigma-point settings.
pub struct FrozenModel {
    pub dynamics: Box<dyn Dynamics>,
    pub observation: Box<dyn ObservationModel<Obs = ObservationBatch>>,
    pub ut: UtConfig,
}

impl FrozenModel {
    pub fn name(&self, kind: ModelKind) -> &'static str {
        match kind {
            ModelKind::Offline => "urs",
            ModelKind::Online => "urs_online",
        }
    }

    /// Filtered belief after assimilating `series[..len]` from `initial`.
    pub fn filter_to(&self, initial: &Gaussian, series: &Series, len: usize) -> Result<Gaussian> {
        if len == 0 {
            return Ok(initial.clone());
        }
        let states = forward_filter(
            &*self.dynamics,
            &*self.observation,
            initial,
            &series.inputs[..len],
            &series.batches[..len],
            &self.ut,
        )?;
        Ok(states.last().expect("non-empty").posterior.clone())
    }

    pub fn forecaster(
        &self,
        label: &str,
        start: Gaussian,
    ) -> FilterForecaster<'_, dyn Dynamics, dyn ObservationModel<Obs = ObservationBatch>> {
        FilterForecaster {
            label: label.to_string(),
            dynamics: &*self.dynamics,
            model: &*self.observation,
            start_belief: start,
            ut: self.ut,
        }
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn model(&self) -> Result<FrozenModel> {
        self.params.validate()?;
        match self.kind {
            ModelKind::Offline => Ok(FrozenModel {
                dynamics: Box::new(self.params.clone()),
                observation: Box::new(OptionObservation { v: self.params.v }),
                ut: self.config.ut,
            }),
            ModelKind::Online => {
                let layout = AugmentedLayout::new(self.params.state_dim(), self.params.input_dim());
                if self.initial.dim() != layout.dim() {
                    return Err(Error::data(
                        "online checkpoint belief does not match the augmented layout",
                    ));
                }
                let dynamics = AugmentedDynamics::new(
                    layout,
                    &self.params.w,
                    self.config.online.param_innovation_var,
                    self.params.input_gain,
                )?;
                let mut online = self.config.online.clone();
                online.ut = self.config.ut;
                Ok(FrozenModel {
                    dynamics: Box::new(dynamics),
                    observation: Box::new(AugmentedObservation {
                        p: layout.p,
                        v: self.params.v,
                    }),
                    ut: online.augmented_ut(&layout),
                })
            }
        }
    }

    /// Checks that `series` is the one the checkpoint was trained on.
    fn check_series(&self, series: &Series) -> Result<()> {
        let need = self.train_len + self.validation_len + self.test_len;
        if series.len() != need {
            return Err(Error::data(format!(
                "checkpoint expects a series of {need} steps, data has {}",
                series.len()
            )));
        }
        if series.input_dim() != self.params.input_dim() {
            return Err(Error::data("input dimension differs from the checkpoint reservoir"));
        }
        Ok(())
    }
}

fn write_trajectory(
    out: &Path,
    model: &FrozenModel,
    beliefs: &[Gaussian],
    batches: &[ObservationBatch],
    radii: Option<Vec<f64>>,
    level: f64,
) -> Result<()> {
    let mut rows = trajectory_rows(&*model.observation, beliefs, batches, level, &model.ut)?;
    if let Some(r) = radii {
        for (row, rho) in rows.iter_mut().zip(r) {
            row.spectral_radius = Some(rho);
        }
    }
    write_trajectory_csv(&out.join("trajectory.csv"), &rows)
}

/// Generalized-EM training. Writes the checkpoint, the fit report and the
/// smoothed training trajectory.
pub fn train_offline(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let cfg = cfg.resolved()?;
    let data = load_data(&cfg)?;
    let mut ckpt = fit_offline(&cfg, &data.series)?;
    ckpt.data_source = Some(data.source.clone());
    prepare_out(out, &cfg)?;
    write_json(&out.join(CHECKPOINT_FILE), &ckpt)?;
    write_json(&out.join("fit_report.json"), &ckpt.report)?;
    let model = ckpt.model()?;
    let train = data.series.slice(0, ckpt.train_len);
    let states = forward_filter(
        &*model.dynamics,
        &*model.observation,
        &ckpt.initial,
        &train.inputs,
        &train.batches,
        &model.ut,
    )?;
    let smoothed = rts_smooth(&ckpt.initial, &states)?;
    write_trajectory(
        out,
        &model,
        &smoothed.marginals[1..],
        &train.batches,
        None,
        cfg.eval.band_level,
    )?;
    Ok(ckpt)
}

/// In-memory offline fit on an already loaded series (config must be resolved).
pub fn fit_offline(cfg: &RunConfig, series: &Series) -> Result<Checkpoint> {
    let (train, validation, test) = series.split(cfg.split.validation_len, cfg.split.test_len)?;
    let init = init_reservoir(&cfg.reservoir)?;
    let belief0 = initial_belief(&train, cfg.reservoir.p, cfg.initial_var)?;
    let fit = gem_fit(&train, &validation, &init, &belief0, &cfg.gem)?;
    info!(
        "offline fit: {} after {} iterations, best validation error {:.5}",
        fit.report.status,
        fit.report.iterations.len(),
        fit.report.best_validation_error
    );
    Ok(Checkpoint {
        kind: ModelKind::Offline,
        seed: cfg.seed,
        params: fit.params,
        initial: fit.initial,
        train_len: train.len(),
        validation_len: validation.len(),
        test_len: test.len(),
        report: TrainingReport::Offline(fit.report),
        data_source: None,
        config: cfg.clone(),
    })
}

/// Joint-UKF training. The trajectory export carries the spectral radius of
/// the smoothed parameter-mean `G` at every step.
pub fn train_online(cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let cfg = cfg.resolved()?;
    let data = load_data(&cfg)?;
    let (train, validation, test) = data.series.split(cfg.split.validation_len, cfg.split.test_len)?;
    let init = init_reservoir(&cfg.reservoir)?;
    let belief0 = initial_belief(&train, cfg.reservoir.p, cfg.initial_var)?;
    let fit = online_fit(&train, &validation, &init, &belief0, &cfg.online)?;
    info!("online fit: {} after {} passes", fit.status, fit.passes.len());
    let radii = fit
        .parameter_path()?
        .iter()
        .skip(1)
        .map(|(_, g, _, _)| crate::reservoir::spectral_radius(g))
        .collect::<Result<Vec<f64>>>()?;
    let ckpt = Checkpoint {
        kind: ModelKind::Online,
        seed: cfg.seed,
        params: fit.params.clone(),
        initial: fit.initial.clone(),
        train_len: train.len(),
        validation_len: validation.len(),
        test_len: test.len(),
        report: TrainingReport::Online {
            passes: fit.passes.clone(),
            best_pass: fit.best_pass,
            status: fit.status.clone(),
        },
        data_source: Some(data.source.clone()),
        config: cfg.clone(),
    };
    prepare_out(out, &cfg)?;
    write_json(&out.join(CHECKPOINT_FILE), &ckpt)?;
    write_json(&out.join("fit_report.json"), &ckpt.report)?;
    let model = ckpt.model()?;
    write_trajectory(
        out,
        &model,
        &fit.smoothed.marginals[1..],
        &train.batches,
        Some(radii),
        cfg.eval.band_level,
    )?;
    Ok(ckpt)
}

/// Data for a checkpoint: its own resolved data settings unless `data`
/// overrides them.
fn checkpoint_data(ckpt: &Checkpoint, data: Option<&crate::config::DataConfig>) -> Result<(RunConfig, LoadedData)> {
    let mut cfg = ckpt.config.clone();
    if let Some(d) = data {
        cfg.data = d.clone();
    }
    let loaded = load_data(&cfg)?;
    ckpt.check_series(&loaded.series)?;
    Ok((cfg, loaded))
}

/// Forecasts the whole test segment from the end of validation without
/// measurement updates.
pub fn forecast(ckpt: &Checkpoint, data: Option<&crate::config::DataConfig>, out: &Path) -> Result<Vec<Forecast>> {
    let (cfg, loaded) = checkpoint_data(ckpt, data)?;
    let model = ckpt.model()?;
    let origin = ckpt.train_len + ckpt.validation_len;
    let belief = model.filter_to(&ckpt.initial, &loaded.series, origin)?;
    let test = loaded.series.slice(origin, loaded.series.len());
    let fc = model.forecaster(model.name(ckpt.kind), belief);
    let forecasts = fc.forecast(&fc.start()?, &test.inputs, &test.batches)?;
    prepare_out(out, &cfg)?;
    write_forecast_csv(
        &out.join("forecast.csv"),
        &forecasts,
        &test.batches,
        cfg.eval.band_level,
    )?;
    Ok(forecasts)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub horizons: Vec<usize>,
    pub mean_errors: Vec<f64>,
    pub coverage_target: CoverageTarget,
    pub band_level: f64,
    /// Observed coverage of the band-level interval per horizon.
    pub band_coverage: Vec<Option<f64>>,
    pub origins: Vec<usize>,
}

impl ModelSummary {
    pub fn from_result(r: &EvalResult, band_level: f64) -> Self {
        Self {
            model: r.model.clone(),
            horizons: r.horizons.clone(),
            mean_errors: r.mean_errors.clone(),
            coverage_target: r.coverage.target,
            band_level,
            band_coverage: r.horizons.iter().map(|&h| r.coverage.at(h, band_level)).collect(),
            origins: r.coverage.counts.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub seed: u64,
    pub train_len: usize,
    pub validation_len: usize,
    pub test_len: usize,
    pub params_fingerprint: u64,
    pub models: Vec<ModelSummary>,
}

fn with_band(levels: &[f64], band: f64) -> Vec<f64> {
    let mut l = levels.to_vec();
    if !l.iter().any(|x| (x - band).abs() < 1e-9) {
        l.push(band);
        l.sort_by(f64::total_cmp);
    }
    l
}

/// Rolling-origin evaluation of a checkpoint (and the implied-volatility
/// baseline when enabled). Model and baseline run as independent tasks.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, series: &Series, exec: Exec) -> Result<Vec<EvalResult>> {
    ckpt.check_series(series)?;
    let cfg = &ckpt.config;
    let model = ckpt.model()?;
    let start = model.filter_to(&ckpt.initial, series, ckpt.train_len)?;
    let levels = with_band(&cfg.eval.levels, cfg.eval.band_level);
    let tasks = if cfg.eval.baseline { 2 } else { 1 };
    let fingerprint = ckpt.params.fingerprint();
    let results = exec.try_map_range(tasks, |i| {
        if i == 0 {
            let fc = model.forecaster(model.name(ckpt.kind), start.clone());
            rolling_k_step_eval(
                &fc,
                series,
                ckpt.train_len,
                ckpt.validation_len,
                &cfg.eval.horizons,
                &levels,
            )
        } else {
            let base = ImpliedVolBaseline::from_batch(&series.batches[ckpt.train_len - 1])?;
            rolling_k_step_eval(
                &base,
                series,
                ckpt.train_len,
                ckpt.validation_len,
                &cfg.eval.horizons,
                &levels,
            )
        }
    })?;
    if ckpt.params.fingerprint() != fingerprint {
        return Err(Error::Contract("evaluation modified the model parameters".into()));
    }
    Ok(results)
}

/// Writes `results.csv` and `coverage.csv` for the first model, per-model
/// variants for the rest, a combined `table.csv` and `summary.json`.
pub fn write_evaluation(out: &Path, ckpt: &Checkpoint, results: &[EvalResult]) -> Result<EvaluateSummary> {
    let band = ckpt.config.eval.band_level;
    for (i, r) in results.iter().enumerate() {
        let suffix = if i == 0 { String::new() } else { format!("_{}", r.model) };
        write_results_csv(&out.join(format!("results{suffix}.csv")), r)?;
        write_coverage_csv(&out.join(format!("coverage{suffix}.csv")), &r.coverage)?;
    }
    let rows: Vec<(String, Vec<usize>, Vec<f64>)> = results
        .iter()
        .map(|r| (r.model.clone(), r.horizons.clone(), r.mean_errors.clone()))
        .collect();
    write_table_csv(&out.join("table.csv"), &rows)?;
    let summary = EvaluateSummary {
        seed: ckpt.seed,
        train_len: ckpt.train_len,
        validation_len: ckpt.validation_len,
        test_len: ckpt.test_len,
        params_fingerprint: ckpt.params.fingerprint(),
        models: results.iter().map(|r| ModelSummary::from_result(r, band)).collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn evaluate(
    ckpt: &Checkpoint,
    data: Option<&crate::config::DataConfig>,
    out: &Path,
    exec: Exec,
) -> Result<EvaluateSummary> {
    let (cfg, loaded) = checkpoint_data(ckpt, data)?;
    let results = evaluate_checkpoint(ckpt, &loaded.series, exec)?;
    prepare_out(out, &cfg)?;
    write_evaluation(out, ckpt, &results)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: String,
    pub models: Vec<ModelSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub horizons: Vec<usize>,
    pub band_level: f64,
    /// Per-model averages over seeds.
    pub mean_errors: Vec<(String, Vec<f64>)>,
    pub mean_band_coverage: Vec<(String, Vec<f64>)>,
    pub seeds: Vec<SeedOutcome>,
}

/// Generate, train offline and evaluate for `seeds` consecutive seeds
/// starting at `cfg.seed`; seeds run as independent tasks.
pub fn run_experiment(cfg: &RunConfig, seeds: usize, exec: Exec) -> Result<ExperimentSummary> {
    let base = cfg.resolved()?;
    if seeds == 0 {
        return Err(Error::Config(vec!["seeds must be at least 1".into()]));
    }
    if base.data.dataset.is_some() || base.data.options.is_some() {
        warn!("multi-seed experiments regenerate synthetic data; data paths are ignored");
    }
    let outcomes = exec.try_map_range(seeds, |k| -> Result<SeedOutcome> {
        let mut c = base.clone();
        c.seed = base.seed + k as u64;
        c.data = Default::default();
        c.data.top_i = base.data.top_i;
        let c = c.resolved()?;
        let data = generate_dataset(&c.synthetic)?;
        let series = data.to_series(c.reservoir.m)?;
        let ckpt = fit_offline(&c, &series)?;
        let results = evaluate_checkpoint(&ckpt, &series, Exec::Sequential)?;
        let status = match &ckpt.report {
            TrainingReport::Offline(r) => r.status.clone(),
            TrainingReport::Online { status, .. } => status.clone(),
        };
        info!("seed {}: k=1 error {:.5}", c.seed, results[0].mean_errors[0]);
        Ok(SeedOutcome {
            seed: c.seed,
            status,
            models: results
                .iter()
                .map(|r| ModelSummary::from_result(r, c.eval.band_level))
                .collect(),
        })
    })?;
    let mut horizons = base.eval.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    let n_models = outcomes[0].models.len();
    let avg = |f: &dyn Fn(&ModelSummary) -> Vec<f64>| -> Vec<(String, Vec<f64>)> {
        (0..n_models)
            .map(|j| {
                let mut acc = DVector::zeros(horizons.len());
                for o in &outcomes {
                    acc += DVector::from_vec(f(&o.models[j]));
                }
                (
                    outcomes[0].models[j].model.clone(),
                    (acc / seeds as f64).iter().copied().collect(),
                )
            })
            .collect()
    };
    let mean_errors = avg(&|m| m.mean_errors.clone());
    let mean_band_coverage = avg(&|m| m.band_coverage.iter().map(|c| c.unwrap_or(f64::NAN)).collect());
    Ok(ExperimentSummary {
        horizons,
        band_level: base.eval.band_level,
        mean_errors,
        mean_band_coverage,
        seeds: outcomes,
    })
}

/// Multi-seed evaluate: `table.csv` holds seed-averaged errors per model and
/// `summary.json` the per-seed details.
pub fn evaluate_seeds(cfg: &RunConfig, seeds: usize, out: &Path, exec: Exec) -> Result<ExperimentSummary> {
    let summary = run_experiment(cfg, seeds, exec)?;
    prepare_out(out, &cfg.resolved()?)?;
    let rows: Vec<(String, Vec<usize>, Vec<f64>)> = summary
        .mean_errors
        .iter()
        .map(|(m, e)| (m.clone(), summary.horizons.clone(), e.clone()))
        .collect();
    write_table_csv(&out.join("table.csv"), &rows)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
