//! Option-quote files: ingestion into a modeling series and export of
//! synthetic datasets in the same schema.
//!
//! Schemas (UTF-8, header row required, ISO-8601 dates):
//!
//! - `options.csv`: `date,expiration,strike,best_bid,best_offer,volume`
//! - `spot.csv`: `date,close`
//! - `rates.csv`: `date,rate` (annualized; percentages are detected)

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::{batch_price, ObservationBatch, OptionSpec};
use crate::series::Series;
use crate::synthetic::{calendar_days, fmt, SyntheticDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketPaths {
    pub options: PathBuf,
    pub spot: PathBuf,
    pub rates: PathBuf,
}

impl MarketPaths {
    /// The three standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            options: dir.join("options.csv"),
            spot: dir.join("spot.csv"),
            rates: dir.join("rates.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub date: NaiveDate,
    pub expiration: NaiveDate,
    pub strike: f64,
    pub best_bid: f64,
    pub best_offer: f64,
    pub volume: f64,
}

/// Counts of everything ingestion discarded or adjusted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub option_rows: usize,
    pub dates_with_options: usize,
    pub dates_kept: usize,
    pub dropped_no_spot: usize,
    pub dropped_no_rate: usize,
    pub expired_rows: usize,
    /// Dates with fewer than `I` quotes (all were used).
    pub short_dates: usize,
    /// Dates with fewer than `m` past returns (inputs zero-padded).
    pub short_history_dates: usize,
    pub rates_in_percent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSeries {
    pub dates: Vec<NaiveDate>,
    pub series: Series,
    pub report: IngestReport,
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn parse_num(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|x| x.is_finite())
}

fn open(path: &Path, header: &[&str], problems: &mut Vec<String>) -> Result<Option<csv::Reader<fs::File>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let got: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if got != header {
        problems.push(format!(
            "{}: expected header {}, found {}",
            path.display(),
            header.join(","),
            got.join(",")
        ));
        return Ok(None);
    }
    Ok(Some(r))
}

/// Parses the options table; every malformed row is reported with its line.
pub fn read_options(path: &Path) -> Result<Vec<OptionQuote>> {
    let mut problems = Vec::new();
    let header = ["date", "expiration", "strike", "best_bid", "best_offer", "volume"];
    let mut out = Vec::new();
    if let Some(mut r) = open(path, &header, &mut problems)? {
        for (k, rec) in r.records().enumerate() {
            let line = k + 2;
            let rec = match rec {
                Ok(x) => x,
                Err(e) => {
                    problems.push(format!("{}:{line}: {e}", path.display()));
                    continue;
                }
            };
            let f = |i: usize| rec.get(i).unwrap_or("");
            let (Some(date), Some(expiration)) = (parse_date(f(0)), parse_date(f(1))) else {
                problems.push(format!("{}:{line}: unparsable date", path.display()));
                continue;
            };
            let (Some(strike), Some(bid), Some(offer), Some(volume)) =
                (parse_num(f(2)), parse_num(f(3)), parse_num(f(4)), parse_num(f(5)))
            else {
                problems.push(format!("{}:{line}: unparsable number", path.display()));
                continue;
            };
            if strike < 0.0 || bid < 0.0 || volume < 0.0 {
                problems.push(format!("{}:{line}: negative strike, bid or volume", path.display()));
                continue;
            }
            if bid > offer {
                problems.push(format!("{}:{line}: bid {bid} above offer {offer}", path.display()));
                continue;
            }
            out.push(OptionQuote {
                date,
                expiration,
                strike,
                best_bid: bid,
                best_offer: offer,
                volume,
            });
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(problems))
    }
}

/// Parses a two-column `date,<value>` table into a date-sorted map.
pub fn read_dated(path: &Path, value: &str) -> Result<BTreeMap<NaiveDate, f64>> {
    let mut problems = Vec::new();
    let mut out = BTreeMap::new();
    if let Some(mut r) = open(path, &["date", value], &mut problems)? {
        for (k, rec) in r.records().enumerate() {
            let line = k + 2;
            let rec = match rec {
                Ok(x) => x,
                Err(e) => {
                    problems.push(format!("{}:{line}: {e}", path.display()));
                    continue;
                }
            };
            match (
                parse_date(rec.get(0).unwrap_or("")),
                parse_num(rec.get(1).unwrap_or("")),
            ) {
                (Some(d), Some(x)) => {
                    if out.insert(d, x).is_some() {
                        problems.push(format!("{}:{line}: duplicate date {d}", path.display()));
                    }
                }
                _ => problems.push(format!("{}:{line}: unparsable row", path.display())),
            }
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Data(problems))
    }
}

/// Builds the modeling series: per date the top-`top_i` quotes by volume
/// (ties: ascending strike, then expiration) priced at mid, maturity in
/// calendar days / 365, forward-filled rate, and the `m` most recent spot
/// returns before the date as input.
pub fn ingest(paths: &MarketPaths, top_i: usize, m: usize) -> Result<MarketSeries> {
    if top_i == 0 || m == 0 {
        return Err(Error::Config(vec!["top_i and m must be at least 1".into()]));
    }
    let quotes = read_options(&paths.options)?;
    let spot = read_dated(&paths.spot, "close")?;
    let mut rates = read_dated(&paths.rates, "rate")?;
    let bad_spot: Vec<String> = spot
        .iter()
        .filter(|(_, c)| !(**c > 0.0))
        .map(|(d, c)| format!("{}: non-positive close {c} on {d}", paths.spot.display()))
        .collect();
    if !bad_spot.is_empty() {
        return Err(Error::Data(bad_spot));
    }

    let mut report = IngestReport {
        option_rows: quotes.len(),
        ..IngestReport::default()
    };
    if !rates.is_empty() {
        let mut vals: Vec<f64> = rates.values().copied().collect();
        vals.sort_by(f64::total_cmp);
        if vals[vals.len() / 2] > 1.0 {
            report.rates_in_percent = true;
            log::info!(
                "rates look like percentages (median {}), converting to fractions",
                vals[vals.len() / 2]
            );
            for v in rates.values_mut() {
                *v /= 100.0;
            }
        }
    }

    let spot_dates: Vec<NaiveDate> = spot.keys().copied().collect();
    let closes: Vec<f64> = spot.values().copied().collect();
    let returns: Vec<f64> = (1..closes.len()).map(|j| closes[j] / closes[j - 1] - 1.0).collect();

    let mut by_date: BTreeMap<NaiveDate, Vec<&OptionQuote>> = BTreeMap::new();
    for q in &quotes {
        if q.expiration <= q.date {
            report.expired_rows += 1;
            continue;
        }
        by_date.entry(q.date).or_default().push(q);
    }
    report.dates_with_options = by_date.len();

    let mut dates = Vec::new();
    let mut inputs = Vec::new();
    let mut batches = Vec::new();
    for (date, mut rows) in by_date {
        let Ok(j) = spot_dates.binary_search(&date) else {
            report.dropped_no_spot += 1;
            continue;
        };
        let Some((_, &rate)) = rates.range(..=date).next_back() else {
            report.dropped_no_rate += 1;
            continue;
        };
        rows.sort_by(|a, b| {
            b.volume
                .total_cmp(&a.volume)
                .then(a.strike.total_cmp(&b.strike))
                .then(a.expiration.cmp(&b.expiration))
        });
        if rows.len() < top_i {
            report.short_dates += 1;
        }
        rows.truncate(top_i);
        let p = closes[j];
        let mut specs = Vec::with_capacity(rows.len());
        let mut ys = Vec::with_capacity(rows.len());
        for q in rows {
            let days = (q.expiration - q.date).num_days();
            specs.push(OptionSpec::new(p, rate, q.strike, days as f64 / 365.0)?);
            ys.push(if q.best_bid == q.best_offer {
                q.best_bid
            } else {
                0.5 * (q.best_bid + q.best_offer)
            });
        }
        // returns[j − 1] is the return into spot date j, so the m returns
        // strictly before date j end at returns[j − 2]
        if j < m + 1 {
            report.short_history_dates += 1;
        }
        inputs.push(DVector::from_fn(
            m,
            |k, _| if j >= k + 2 { returns[j - 2 - k] } else { 0.0 },
        ));
        batches.push(ObservationBatch::new(specs, DVector::from_vec(ys))?);
        dates.push(date);
    }
    report.dates_kept = dates.len();
    let dropped = report.dropped_no_spot + report.dropped_no_rate;
    if dropped > 0 {
        log::warn!("dropped {dropped} dates without a spot price or rate");
    }
    if report.short_dates > 0 {
        log::warn!("{} dates had fewer than {top_i} quotes", report.short_dates);
    }
    if dates.is_empty() {
        return Err(Error::data("no usable dates after ingestion"));
    }
    Ok(MarketSeries {
        dates,
        series: Series::new(inputs, batches, None)?,
        report,
    })
}

/// Fixture-generation settings for the market schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketExport {
    pub start: NaiveDate,
    /// Half bid-offer spread in currency; zero keeps prices exact.
    pub half_spread: f64,
    /// Additional low-volume quotes per date that top-I selection must skip.
    pub distractors: usize,
    /// Write rates in percent instead of fractions.
    pub rates_in_percent: bool,
}

impl Default for MarketExport {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 1, 2).expect("valid date"),
            half_spread: 0.0,
            distractors: 0,
            rates_in_percent: false,
        }
    }
}

/// Weekdays starting at `start` (inclusive).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Writes a synthetic dataset as `options.csv`, `spot.csv` and `rates.csv`.
/// Step `t` falls on the `t`-th business day from `opts.start`; the quote
/// of index `i` gets the `i`-th highest volume.
pub fn export_market(data: &SyntheticDataset, dir: &Path, opts: &MarketExport) -> Result<MarketPaths> {
    fs::create_dir_all(dir)?;
    let paths = MarketPaths::in_dir(dir);
    let dates = business_days(opts.start, data.prices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(data.config.seed);
    rng.set_stream(2);

    let mut w = csv::Writer::from_path(&paths.spot)?;
    w.write_record(["date", "close"])?;
    for (d, p) in dates.iter().zip(&data.prices) {
        w.write_record([d.to_string(), fmt(*p)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.rates)?;
    w.write_record(["date", "rate"])?;
    let scale = if opts.rates_in_percent { 100.0 } else { 1.0 };
    for d in &dates {
        w.write_record([d.to_string(), fmt(data.config.rate * scale)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.options)?;
    w.write_record(["date", "expiration", "strike", "best_bid", "best_offer", "volume"])?;
    let cfg = &data.config;
    for (k, batch) in data.quotes.iter().enumerate() {
        let date = dates[k + 1];
        let n_top = batch.len();
        let row = |w: &mut csv::Writer<fs::File>, days: i64, strike: f64, price: f64, volume: usize| -> Result<()> {
            let exp = date + Days::new(days as u64);
            let (bid, offer) = if opts.half_spread > 0.0 {
                ((price - opts.half_spread).max(0.0), price + opts.half_spread)
            } else {
                (price, price)
            };
            w.write_record([
                date.to_string(),
                exp.to_string(),
                fmt(strike),
                fmt(bid),
                fmt(offer),
                volume.to_string(),
            ])?;
            Ok(())
        };
        for (i, (spec, y)) in batch.specs.iter().zip(batch.prices.iter()).enumerate() {
            row(
                &mut w,
                data.expiry_days[k][i],
                spec.strike,
                *y,
                1000 * (n_top - i + opts.distractors),
            )?;
        }
        for j in 0..opts.distractors {
            let strike = data.prices[k + 1] * rng.random_range(cfg.strike_low..=cfg.strike_high);
            let days = calendar_days(rng.random_range(cfg.maturity_min_days..=cfg.maturity_max_days));
            let spec = OptionSpec::new(data.prices[k + 1], cfg.rate, strike, days as f64 / 365.0)?;
            let y = batch_price(std::slice::from_ref(&spec), data.ground_truth[k + 1].max(1e-4))?[0];
            row(&mut w, days, strike, y, 1000 * (opts.distractors - j) - 500)?;
        }
    }
    w.flush()?;
    Ok(paths)
}
