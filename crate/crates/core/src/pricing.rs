use libm::erfc;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exogenous configuration of one call option quote.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub spot: f64,
    pub rate: f64,
    pub strike: f64,
    /// Years to expiry (calendar days / 365).
    pub maturity: f64,
}

impl OptionSpec {
    pub fn new(spot: f64, rate: f64, strike: f64, maturity: f64) -> Result<Self> {
        let s = Self {
            spot,
            rate,
            strike,
            maturity,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot > 0.0 && self.spot.is_finite()) {
            return Err(Error::Domain(format!("spot must be positive, got {}", self.spot)));
        }
        if !(self.strike >= 0.0 && self.strike.is_finite()) {
            return Err(Error::Domain(format!(
                "strike must be non-negative, got {}",
                self.strike
            )));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::Domain(format!(
                "maturity must be positive, got {}",
                self.maturity
            )));
        }
        if !self.rate.is_finite() {
            return Err(Error::Domain("rate must be finite".into()));
        }
        Ok(())
    }

    pub fn discounted_strike(&self) -> f64 {
        self.strike * (-self.rate * self.maturity).exp()
    }

    /// No-arbitrage price envelope `[max(0, p − K e^{−rT}), p]`.
    pub fn price_bounds(&self) -> (f64, f64) {
        ((self.spot - self.discounted_strike()).max(0.0), self.spot)
    }
}

/// Quotes observed on one date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub specs: Vec<OptionSpec>,
    pub prices: DVector<f64>,
}

impl ObservationBatch {
    pub fn new(specs: Vec<OptionSpec>, prices: DVector<f64>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::shape("observation batch needs at least one option"));
        }
        if specs.len() != prices.len() {
            return Err(Error::shape(format!(
                "{} option specs but {} prices",
                specs.len(),
                prices.len()
            )));
        }
        for s in &specs {
            s.validate()?;
        }
        if prices.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::Domain("option prices must be finite and non-negative".into()));
        }
        Ok(Self { specs, prices })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Standard normal CDF through the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Black-Scholes price of a European call at volatility `sigma`.
pub fn bs_call_price(spec: &OptionSpec, sigma: f64) -> Result<f64> {
    spec.validate()?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("volatility must be positive, got {sigma}")));
    }
    Ok(call_unchecked(spec, sigma))
}

pub(crate) fn call_unchecked(spec: &OptionSpec, sigma: f64) -> f64 {
    if spec.strike == 0.0 {
        return spec.spot;
    }
    let sd = sigma * spec.maturity.sqrt();
    let d1 = ((spec.spot / spec.strike).ln() + (spec.rate + 0.5 * sigma * sigma) * spec.maturity) / sd;
    let d2 = d1 - sd;
    let price = spec.spot * norm_cdf(d1) - spec.discounted_strike() * norm_cdf(d2);
    let (lo, hi) = spec.price_bounds();
    price.clamp(lo, hi)
}

pub fn batch_price(specs: &[OptionSpec], sigma: f64) -> Result<DVector<f64>> {
    for s in specs {
        s.validate()?;
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("volatility must be positive, got {sigma}")));
    }
    Ok(batch_unchecked(specs, sigma))
}

pub(crate) fn batch_unchecked(specs: &[OptionSpec], sigma: f64) -> DVector<f64> {
    DVector::from_iterator(specs.len(), specs.iter().map(|s| call_unchecked(s, sigma)))
}

pub const IV_LOWER: f64 = 1e-6;
pub const IV_UPPER: f64 = 5.0;
const IV_FLOOR: f64 = 1e-12;

/// Volatility reproducing `price`, found by Brent's method on
/// `[1e-6, 5]`. Prices so close to the intrinsic bound that the root lies
/// below 1e-6 are resolved on `[1e-12, 1e-6]`.
pub fn implied_vol(spec: &OptionSpec, price: f64) -> Result<f64> {
    spec.validate()?;
    let (lo_bound, hi_bound) = spec.price_bounds();
    if !(price > lo_bound && price < hi_bound) {
        return Err(Error::Domain(format!(
            "price {price} outside the no-arbitrage interval ({lo_bound}, {hi_bound})"
        )));
    }
    let f = |s: f64| call_unchecked(spec, s) - price;
    let f_hi = f(IV_UPPER);
    if f_hi < 0.0 {
        return Err(Error::Numerical(format!(
            "no implied volatility below {IV_UPPER} reproduces price {price}"
        )));
    }
    let f_lo = f(IV_LOWER);
    if f_lo > 0.0 {
        let f_floor = f(IV_FLOOR);
        if f_floor > 0.0 {
            return Err(Error::Numerical(format!(
                "price {price} is indistinguishable from the intrinsic bound"
            )));
        }
        return Ok(brent(f, IV_FLOOR, IV_LOWER, f_floor, f_lo));
    }
    Ok(brent(f, IV_LOWER, IV_UPPER, f_lo, f_hi))
}

/// Brent root finder run to full double precision in `x`.
fn brent<F: Fn(f64) -> f64>(f: F, a0: f64, b0: f64, fa0: f64, fb0: f64) -> f64 {
    let (mut a, mut b, mut fa, mut fb) = (a0, b0, fa0, fb0);
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..300 {
        if (fb > 0.0) == (fc > 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol || fb == 0.0 {
            return b;
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(xm) };
        fb = f(b);
    }
    b
}
