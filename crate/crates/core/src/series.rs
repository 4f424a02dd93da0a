use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::pricing::{implied_vol, ObservationBatch};

/// Aligned inputs and option quotes. Element `k` belongs to step `t = k + 1`;
/// step 0 is the initial belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub inputs: Vec<DVector<f64>>,
    pub batches: Vec<ObservationBatch>,
    /// Ground-truth volatility per step when known (synthetic data).
    pub truth: Option<Vec<f64>>,
}

impl Series {
    pub fn new(inputs: Vec<DVector<f64>>, batches: Vec<ObservationBatch>, truth: Option<Vec<f64>>) -> Result<Self> {
        if inputs.len() != batches.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} observation batches",
                inputs.len(),
                batches.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != inputs.len() {
                return Err(Error::shape("ground truth length differs from series length"));
            }
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|u| u.len() != first.len()) {
                return Err(Error::shape("inputs have inconsistent dimensions"));
            }
        }
        Ok(Self { inputs, batches, truth })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, |u| u.len())
    }

    pub fn slice(&self, start: usize, end: usize) -> Series {
        Series {
            inputs: self.inputs[start..end].to_vec(),
            batches: self.batches[start..end].to_vec(),
            truth: self.truth.as_ref().map(|t| t[start..end].to_vec()),
        }
    }

    /// Splits into (train, validation, test) with the given tail lengths.
    pub fn split(&self, validation_len: usize, test_len: usize) -> Result<(Series, Series, Series)> {
        let n = self.len();
        if validation_len + test_len >= n {
            return Err(Error::Contract(format!(
                "series of length {n} cannot hold {validation_len} validation and {test_len} test steps plus training"
            )));
        }
        let t = n - validation_len - test_len;
        Ok((
            self.slice(0, t),
            self.slice(t, t + validation_len),
            self.slice(t + validation_len, n),
        ))
    }

    /// Mean implied volatility of the quotes at element `k`.
    pub fn mean_implied_vol(&self, k: usize) -> Result<f64> {
        let b = &self.batches[k];
        let vols: Vec<f64> = b
            .specs
            .iter()
            .zip(b.prices.iter())
            .filter_map(|(s, p)| implied_vol(s, *p).ok())
            .collect();
        if vols.is_empty() {
            return Err(Error::Numerical(format!("no invertible quote at step {}", k + 1)));
        }
        Ok(vols.iter().sum::<f64>() / vols.len() as f64)
    }
}

/// Initial state belief centred on the first date's implied volatility.
pub fn initial_belief(series: &Series, p: usize, var: f64) -> Result<Gaussian> {
    let level = series.mean_implied_vol(0)?.clamp(1e-3, 0.999);
    Gaussian::new(DVector::from_element(p, level), DMatrix::identity(p, p) * var)
}
