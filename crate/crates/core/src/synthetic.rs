//! CIR ground-truth volatility and synthetic option datasets.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::{batch_price, ObservationBatch, OptionSpec};
use crate::series::Series;

/// Square-root diffusion `dV = reversion (μ − V) dt + vol_of_vol √V dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirConfig {
    pub v0: f64,
    pub long_term: f64,
    pub reversion: f64,
    pub vol_of_vol: f64,
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for CirConfig {
    fn default() -> Self {
        Self {
            v0: 0.15,
            long_term: 0.15,
            reversion: 10.0,
            vol_of_vol: 0.04,
            dt: 1.0 / 252.0,
            n: 200,
            seed: 0,
        }
    }
}

impl CirConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("cir.v0", self.v0),
            ("cir.long_term", self.long_term),
            ("cir.reversion", self.reversion),
            ("cir.dt", self.dt),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive, got {x}"));
            }
        }
        if !(self.vol_of_vol >= 0.0 && self.vol_of_vol.is_finite()) {
            v.push(format!("cir.vol_of_vol must be non-negative, got {}", self.vol_of_vol));
        }
        if self.n == 0 {
            v.push("cir.n must be at least 1".to_string());
        }
        v
    }

    /// `E[V_t]` of the exact diffusion.
    pub fn analytic_mean(&self, t: f64) -> f64 {
        self.long_term + (self.v0 - self.long_term) * (-self.reversion * t).exp()
    }

    /// `Var[V_t]` of the exact diffusion.
    pub fn analytic_var(&self, t: f64) -> f64 {
        let (k, mu, s) = (self.reversion, self.long_term, self.vol_of_vol);
        let e = (-k * t).exp();
        self.v0 * s * s / k * (e - e * e) + mu * s * s / (2.0 * k) * (1.0 - e).powi(2)
    }
}

/// Euler–Maruyama with full truncation, drawing from `rng`.
pub fn simulate_cir_with(cfg: &CirConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut path = Vec::with_capacity(cfg.n + 1);
    let mut v = cfg.v0;
    path.push(v);
    let sq = cfg.dt.sqrt();
    for _ in 0..cfg.n {
        let z: f64 = StandardNormal.sample(rng);
        let vp = v.max(0.0);
        v = (v + cfg.reversion * (cfg.long_term - vp) * cfg.dt + cfg.vol_of_vol * vp.sqrt() * sq * z).max(0.0);
        path.push(v);
    }
    path
}

/// Path `V_0..V_n`, deterministic in `cfg.seed`.
pub fn simulate_cir(cfg: &CirConfig) -> Result<Vec<f64>> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok(simulate_cir_with(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)))
}

/// How the noise level `κ_V` scales the deviation draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    StdDev,
    Variance,
}

/// Scale of the simulated returns relative to `V_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnScale {
    /// `u_t ~ N(0, V_t²)`.
    StdDev,
    /// `u_t ~ N(0, V_t)`.
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub cir: CirConfig,
    pub kappa_v: f64,
    pub kappa_scale: NoiseScale,
    pub return_scale: ReturnScale,
    pub options_per_step: usize,
    pub p0: f64,
    pub rate: f64,
    /// Strikes are drawn uniformly from `[strike_low, strike_high] · p_t`.
    pub strike_low: f64,
    pub strike_high: f64,
    /// Maturities are drawn uniformly in trading days.
    pub maturity_min_days: u32,
    pub maturity_max_days: u32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            cir: CirConfig::default(),
            kappa_v: 0.01,
            kappa_scale: NoiseScale::StdDev,
            return_scale: ReturnScale::StdDev,
            options_per_step: 5,
            p0: 2000.0,
            rate: 0.02,
            strike_low: 0.9,
            strike_high: 1.0,
            maturity_min_days: 21,
            maturity_max_days: 252,
            seed: 0,
        }
    }
}

pub const VOL_CLIP: (f64, f64) = (1e-4, 0.9999);
const TRADING_DAYS: f64 = 252.0;

impl SyntheticConfig {
    /// Volatility starts at its long-term level.
    pub fn stationary(seed: u64) -> Self {
        Self {
            cir: CirConfig {
                seed,
                ..CirConfig::default()
            },
            seed,
            ..Self::default()
        }
    }

    /// Non-stationary variant: initial volatility away from the long-term level.
    pub fn non_stationary(seed: u64) -> Self {
        let mut c = Self::stationary(seed);
        c.cir.v0 = 0.2;
        c
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.cir.violations();
        if !(self.kappa_v >= 0.0 && self.kappa_v.is_finite()) {
            v.push(format!("synthetic.kappa_v must be non-negative, got {}", self.kappa_v));
        }
        if self.options_per_step == 0 {
            v.push("synthetic.options_per_step must be at least 1".to_string());
        }
        if !(self.p0 > 0.0) {
            v.push("synthetic.p0 must be positive".to_string());
        }
        if !(self.strike_low >= 0.0 && self.strike_low <= self.strike_high) {
            v.push("synthetic.strike_low must lie in [0, strike_high]".to_string());
        }
        if self.maturity_min_days == 0 || self.maturity_min_days > self.maturity_max_days {
            v.push("synthetic maturity day range must satisfy 1 <= min <= max".to_string());
        }
        v
    }

    fn noise_sd(&self) -> f64 {
        match self.kappa_scale {
            NoiseScale::StdDev => self.kappa_v,
            NoiseScale::Variance => self.kappa_v.sqrt(),
        }
    }

    fn return_sd(&self, vol: f64) -> f64 {
        match self.return_scale {
            ReturnScale::StdDev => vol,
            ReturnScale::Variance => vol.sqrt(),
        }
    }
}

/// Calendar days to expiry for a maturity drawn in trading days.
pub fn calendar_days(trading_days: u32) -> i64 {
    (trading_days as f64 * 365.0 / TRADING_DAYS).round() as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    /// `V_0..V_n`.
    pub ground_truth: Vec<f64>,
    /// Deviated volatilities, `deviated[t−1][i]` for `t = 1..n`.
    pub deviated: Vec<Vec<f64>>,
    /// `u_1..u_n`.
    pub returns: Vec<f64>,
    /// `p_0..p_n`.
    pub prices: Vec<f64>,
    /// Calendar days to expiry per quote, aligned with `quotes`.
    pub expiry_days: Vec<Vec<i64>>,
    /// Quotes at `t = 1..n`.
    pub quotes: Vec<ObservationBatch>,
}

/// Synthetic dataset: CIR ground truth, deviated volatilities, returns,
/// price path and Black-Scholes quotes with random strikes and maturities.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    let truth = simulate_cir(&cfg.cir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // keep the option stream independent of the path stream
    rng.set_stream(1);
    let n = cfg.cir.n;
    let noise_sd = cfg.noise_sd();
    let mut prices = Vec::with_capacity(n + 1);
    prices.push(cfg.p0);
    let mut returns = Vec::with_capacity(n);
    let mut deviated = Vec::with_capacity(n);
    let mut expiry_days = Vec::with_capacity(n);
    let mut quotes = Vec::with_capacity(n);
    for t in 1..=n {
        let sd = cfg.return_sd(truth[t]);
        let prev = prices[t - 1];
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut u = sd * z;
        if prev * (1.0 + u) <= 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            u = sd * z;
            if prev * (1.0 + u) <= 0.0 {
                return Err(Error::Numerical(format!("price path turned non-positive at step {t}")));
            }
        }
        let p = prev * (1.0 + u);
        returns.push(u);
        prices.push(p);
        let mut vols = Vec::with_capacity(cfg.options_per_step);
        let mut days = Vec::with_capacity(cfg.options_per_step);
        let mut specs = Vec::with_capacity(cfg.options_per_step);
        let mut ys = Vec::with_capacity(cfg.options_per_step);
        for _ in 0..cfg.options_per_step {
            let z: f64 = StandardNormal.sample(&mut rng);
            let vol = (truth[t] + noise_sd * z).clamp(VOL_CLIP.0, VOL_CLIP.1);
            let k = p * rng.random_range(cfg.strike_low..=cfg.strike_high);
            let d = calendar_days(rng.random_range(cfg.maturity_min_days..=cfg.maturity_max_days));
            let spec = OptionSpec::new(p, cfg.rate, k, d as f64 / 365.0)?;
            ys.push(batch_price(std::slice::from_ref(&spec), vol)?[0]);
            vols.push(vol);
            days.push(d);
            specs.push(spec);
        }
        deviated.push(vols);
        expiry_days.push(days);
        quotes.push(ObservationBatch::new(specs, DVector::from_vec(ys))?);
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        ground_truth: truth,
        deviated,
        returns,
        prices,
        expiry_days,
        quotes,
    })
}

/// Reservoir input at step `t`: the `m` most recent returns known before
/// `t` (`u_{t−1}, …, u_{t−m}`), zero-padded at the start of the series.
pub fn lagged_inputs(returns: &[f64], m: usize) -> Vec<DVector<f64>> {
    (0..returns.len())
        .map(|k| DVector::from_fn(m, |j, _| if j < k { returns[k - 1 - j] } else { 0.0 }))
        .collect()
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    /// Modeling series with `m`-dimensional lagged-return inputs and the CIR
    /// path as ground truth.
    pub fn to_series(&self, m: usize) -> Result<Series> {
        Series::new(
            lagged_inputs(&self.returns, m),
            self.quotes.clone(),
            Some(self.ground_truth[1..].to_vec()),
        )
    }

    /// Writes `ground_truth.csv`, `quotes.csv`, `series.csv`, `deviated.csv`
    /// and `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("ground_truth.csv"))?;
        w.write_record(["t", "volatility"])?;
        for (t, v) in self.ground_truth.iter().enumerate() {
            w.write_record([t.to_string(), fmt(*v)])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("series.csv"))?;
        w.write_record(["t", "price", "return"])?;
        for (t, p) in self.prices.iter().enumerate() {
            let r = if t == 0 {
                String::new()
            } else {
                fmt(self.returns[t - 1])
            };
            w.write_record([t.to_string(), fmt(*p), r])?;
        }
        w.flush()?;

        let mut q = csv::Writer::from_path(dir.join("quotes.csv"))?;
        q.write_record(["t", "i", "strike", "maturity", "price"])?;
        let mut d = csv::Writer::from_path(dir.join("deviated.csv"))?;
        d.write_record(["t", "i", "volatility", "expiry_days"])?;
        for (k, batch) in self.quotes.iter().enumerate() {
            for (i, (s, y)) in batch.specs.iter().zip(batch.prices.iter()).enumerate() {
                let t = (k + 1).to_string();
                q.write_record([t.clone(), i.to_string(), fmt(s.strike), fmt(s.maturity), fmt(*y)])?;
                d.write_record([
                    t,
                    i.to_string(),
                    fmt(self.deviated[k][i]),
                    self.expiry_days[k][i].to_string(),
                ])?;
            }
        }
        q.flush()?;
        d.flush()?;

        let manifest = Manifest {
            n: self.config.cir.n,
            kappa_v: self.config.kappa_v,
            options_per_step: self.config.options_per_step,
            config: self.config.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Reads a bundle written by [`SyntheticDataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let config = manifest.config;
        let mut problems = Vec::new();

        let ground_truth: Vec<f64> = read_rows(&dir.join("ground_truth.csv"), &mut problems)?
            .into_iter()
            .map(|r| r[1])
            .collect();
        let series = read_rows_opt(&dir.join("series.csv"), &mut problems)?;
        let prices: Vec<f64> = series.iter().map(|r| r[1].unwrap_or(f64::NAN)).collect();
        let returns: Vec<f64> = series.iter().skip(1).map(|r| r[2].unwrap_or(f64::NAN)).collect();
        let quotes_rows = read_rows(&dir.join("quotes.csv"), &mut problems)?;
        let dev_rows = read_rows(&dir.join("deviated.csv"), &mut problems)?;
        if !problems.is_empty() {
            return Err(Error::Data(problems));
        }
        let n = config.cir.n;
        if ground_truth.len() != n + 1 || prices.len() != n + 1 || quotes_rows.len() != dev_rows.len() {
            return Err(Error::data("bundle files disagree with the manifest length"));
        }
        let mut quotes = Vec::with_capacity(n);
        let mut deviated = vec![Vec::new(); n];
        let mut expiry_days = vec![Vec::new(); n];
        let mut specs = vec![Vec::new(); n];
        let mut ys = vec![Vec::new(); n];
        for (row, drow) in quotes_rows.iter().zip(&dev_rows) {
            let t = row[0] as usize;
            if t == 0 || t > n || drow[0] as usize != t {
                return Err(Error::data(format!("quote row with step {t} outside 1..={n}")));
            }
            specs[t - 1].push(OptionSpec::new(prices[t], config.rate, row[2], row[3])?);
            ys[t - 1].push(row[4]);
            deviated[t - 1].push(drow[2]);
            expiry_days[t - 1].push(drow[3] as i64);
        }
        for (s, y) in specs.into_iter().zip(ys) {
            quotes.push(ObservationBatch::new(s, DVector::from_vec(y))?);
        }
        Ok(Self {
            config,
            ground_truth,
            deviated,
            returns,
            prices,
            expiry_days,
            quotes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n: usize,
    kappa_v: f64,
    options_per_step: usize,
    config: SyntheticConfig,
}

/// Shortest representation that parses back to the same double.
pub(crate) fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn read_rows_opt(path: &Path, problems: &mut Vec<String>) -> Result<Vec<Vec<Option<f64>>>> {
    let mut r = csv::Reader::from_path(path)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("?").to_string();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row: Vec<Option<f64>> = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    None
                } else {
                    f.parse().ok().or(Some(f64::NAN))
                }
            })
            .collect();
        if row.iter().flatten().any(|x| x.is_nan()) {
            problems.push(format!("{name}:{}: unparsable number", line + 2));
        }
        out.push(row);
    }
    Ok(out)
}

fn read_rows(path: &Path, problems: &mut Vec<String>) -> Result<Vec<Vec<f64>>> {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("?").to_string();
    let rows = read_rows_opt(path, problems)?;
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(line, r)| {
            if r.iter().any(|x| x.is_none()) {
                problems.push(format!("{name}:{}: empty field", line + 2));
            }
            r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()
        })
        .collect())
}
