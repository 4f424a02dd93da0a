//! Run configuration: one TOML document with a section per component.
//! Defaults reproduce the two-year option-experiment setting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{default_levels, DEFAULT_HORIZONS};
use crate::gem::GemConfig;
use crate::market::MarketExport;
use crate::online::OnlineConfig;
use crate::reservoir::InitConfig;
use crate::synthetic::SyntheticConfig;
use crate::unscented::UtConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub validation_len: usize,
    pub test_len: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_len: 1,
            test_len: 24,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthetic bundle directory (takes precedence over market files).
    pub dataset: Option<PathBuf>,
    pub options: Option<PathBuf>,
    pub spot: Option<PathBuf>,
    pub rates: Option<PathBuf>,
    /// Quotes kept per date.
    pub top_i: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    pub levels: Vec<f64>,
    /// Nominal mass of the credible band in trajectory exports.
    pub band_level: f64,
    /// Also score the implied-volatility baseline.
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
            levels: default_levels(),
            band_level: 0.95,
            baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; copied into every component seed.
    pub seed: u64,
    /// Variance of the isotropic time-0 state belief.
    pub initial_var: f64,
    pub ut: UtConfig,
    pub reservoir: InitConfig,
    pub gem: GemConfig,
    pub online: OnlineConfig,
    pub synthetic: SyntheticConfig,
    pub split: SplitConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    /// Market-schema fixture written by `simulate`.
    pub fixture: MarketExport,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            initial_var: 1e-4,
            ut: UtConfig::default(),
            reservoir: InitConfig {
                bias_fill: Some(-2.3),
                ..InitConfig::default()
            },
            gem: GemConfig::default(),
            online: OnlineConfig::default(),
            synthetic: SyntheticConfig::default(),
            split: SplitConfig::default(),
            data: DataConfig {
                top_i: 5,
                ..DataConfig::default()
            },
            eval: EvalConfig::default(),
            fixture: MarketExport::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Every violated constraint, each prefixed with its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.initial_var > 0.0) {
            v.push(format!("initial_var must be positive, got {}", self.initial_var));
        }
        if !(self.ut.alpha > 0.0 && self.ut.alpha.is_finite()) {
            v.push(format!("ut.alpha must be positive, got {}", self.ut.alpha));
        } else if self.ut.validate(self.reservoir.p).is_err() {
            v.push("ut settings give a non-positive sigma-point spread for the reservoir dimension".into());
        }
        v.extend(self.reservoir.violations());
        v.extend(self.gem.violations().into_iter().filter(|s| !s.starts_with("ut.")));
        v.extend(self.online.violations().into_iter().filter(|s| !s.starts_with("ut.")));
        v.extend(self.synthetic.violations().into_iter().map(|s| {
            if s.starts_with("cir.") {
                format!("synthetic.{s}")
            } else {
                s
            }
        }));
        if self.data.top_i == 0 {
            v.push("data.top_i must be at least 1".into());
        }
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            v.push("eval.horizons must be a non-empty list of positive steps".into());
        }
        let max_h = self.eval.horizons.iter().copied().max().unwrap_or(0);
        if self.split.test_len < max_h {
            v.push(format!(
                "split.test_len ({}) is shorter than the largest horizon ({max_h})",
                self.split.test_len
            ));
        }
        if self.eval.levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            v.push("eval.levels must lie in (0, 1]".into());
        }
        if !(self.eval.band_level > 0.0 && self.eval.band_level < 1.0) {
            v.push("eval.band_level must lie in (0, 1)".into());
        }
        if !(self.fixture.half_spread >= 0.0) {
            v.push("fixture.half_spread must be non-negative".into());
        }
        v
    }

    /// Validated copy with the top-level seed and sigma-point settings
    /// propagated into every component.
    pub fn resolved(&self) -> Result<Self> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut c = self.clone();
        c.reservoir.seed = c.seed;
        c.synthetic.seed = c.seed;
        c.synthetic.cir.seed = c.seed;
        c.gem.ut = c.ut;
        c.online.ut = c.ut;
        Ok(c)
    }
}
