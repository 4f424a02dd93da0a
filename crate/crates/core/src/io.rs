//! Plot-ready CSV exports and JSON helpers shared by the pipeline commands.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{central_z, Forecast};
use crate::gaussian::Gaussian;
use crate::pricing::ObservationBatch;
use crate::ssm::{measurement_moments, ObservationModel};
use crate::synthetic::fmt;
use crate::unscented::UtConfig;

/// One exported step of a state trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub sigma_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub prices: Vec<f64>,
    pub spectral_radius: Option<f64>,
}

/// Readout band and predicted option prices under each belief.
/// `beliefs[k]` pairs with `batches[k]` and is labelled `t = k + 1`.
pub fn trajectory_rows<M>(
    model: &M,
    beliefs: &[Gaussian],
    batches: &[ObservationBatch],
    level: f64,
    ut: &UtConfig,
) -> Result<Vec<TrajectoryRow>>
where
    M: ObservationModel<Obs = ObservationBatch> + ?Sized,
{
    if beliefs.len() != batches.len() {
        return Err(Error::shape(format!(
            "{} beliefs but {} observation batches",
            beliefs.len(),
            batches.len()
        )));
    }
    let z = central_z(level);
    beliefs
        .iter()
        .zip(batches)
        .enumerate()
        .map(|(k, (b, batch))| {
            let sigma = model.readout(b)?;
            let (mean, sd) = (sigma.mean()[0], sigma.cov()[(0, 0)].max(0.0).sqrt());
            let (prices, _, _) = measurement_moments(model, b, batch, ut)?;
            Ok(TrajectoryRow {
                t: k + 1,
                sigma_mean: mean,
                ci_low: mean - z * sd,
                ci_high: mean + z * sd,
                prices: prices.iter().copied().collect(),
                spectral_radius: None,
            })
        })
        .collect()
}

/// Columns `t, sigma_mean, ci_low, ci_high, price_1..price_I` and a trailing
/// `spectral_radius` when any row carries one. Short rows leave blanks.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let width = rows.iter().map(|r| r.prices.len()).max().unwrap_or(0);
    let with_radius = rows.iter().any(|r| r.spectral_radius.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["t", "sigma_mean", "ci_low", "ci_high"].map(String::from).to_vec();
    header.extend((1..=width).map(|i| format!("price_{i}")));
    if with_radius {
        header.push("spectral_radius".into());
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string(), fmt(r.sigma_mean), fmt(r.ci_low), fmt(r.ci_high)];
        rec.extend((0..width).map(|i| r.prices.get(i).map_or(String::new(), |&p| fmt(p))));
        if with_radius {
            rec.push(r.spectral_radius.map_or(String::new(), fmt));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Multi-step forecast from one origin: `horizon, sigma_mean, ci_low,
/// ci_high`, then predicted and realized prices per option.
pub fn write_forecast_csv(
    path: &Path,
    forecasts: &[Forecast],
    realized: &[ObservationBatch],
    level: f64,
) -> Result<()> {
    if forecasts.len() != realized.len() {
        return Err(Error::shape("forecast and realized lengths differ"));
    }
    let width = realized.iter().map(|b| b.len()).max().unwrap_or(0);
    let z = central_z(level);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["horizon", "sigma_mean", "ci_low", "ci_high"]
        .map(String::from)
        .to_vec();
    header.extend((1..=width).map(|i| format!("predicted_{i}")));
    header.extend((1..=width).map(|i| format!("realized_{i}")));
    w.write_record(&header)?;
    for (k, (f, b)) in forecasts.iter().zip(realized).enumerate() {
        let sd = f.sigma_var.max(0.0).sqrt();
        let mut rec = vec![
            (k + 1).to_string(),
            fmt(f.sigma_mean),
            fmt(f.sigma_mean - z * sd),
            fmt(f.sigma_mean + z * sd),
        ];
        rec.extend((0..width).map(|i| f.price_mean.get(i).map_or(String::new(), |&p| fmt(p))));
        rec.extend((0..width).map(|i| b.prices.get(i).map_or(String::new(), |&p| fmt(p))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}
