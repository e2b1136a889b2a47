use std::path::{Path, PathBuf};

use lbe_core::estimate::{Pooling, ReplicateMode};
use lbe_core::numerics::IntervalKind;
use lbe_core::panel::{NormalizationScope, PriceIndexMode};
use lbe_core::treatment::{EventSample, PanelOutcome, StateVariable};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Run configuration. Every section is optional in the file; missing keys take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; required by every stochastic stage.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub input: InputConfig,
    pub simulate: SimulateConfig,
    pub estimate: EstimateConfig,
    pub matching: MatchingConfig,
    pub event_study: EventStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("out"),
            input: InputConfig::default(),
            simulate: SimulateConfig::default(),
            estimate: EstimateConfig::default(),
            matching: MatchingConfig::default(),
            event_study: EventStudyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Plant panel CSV. Defaults to the simulator's output in the run directory.
    pub panel: Option<PathBuf>,
    pub price_index_mode: PriceIndexMode,
    /// Materials price index (wti mode). Defaults to `<panel stem>_price_index.csv`.
    pub price_index: Option<PathBuf>,
    /// Origin-industry output price indices (io mode).
    pub origin_prices: Option<PathBuf>,
    /// Destination/origin weights (io mode).
    pub io_weights: Option<PathBuf>,
    /// Output price indices (fitted mode).
    pub output_prices: Option<PathBuf>,
    /// Oil price series with columns year, price (fitted mode).
    pub oil: Option<PathBuf>,
    pub normalization: NormalizationScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_plants: usize,
    pub n_years: usize,
    pub n_industries: usize,
    pub measurement_sd: f64,
    /// Permanent productivity shift (H, S, U) from the first export year on.
    pub entry_effect: [f64; 3],
    /// Export coefficients of the law of motion; `None` keeps the defaults.
    pub markov_export_effect: Option<[f64; 3]>,
    /// Log machinery step at export entry; `None` disables machinery.
    pub machinery_entry_step: Option<f64>,
    pub write_truth: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_plants: 2000,
            n_years: 10,
            n_industries: 10,
            measurement_sd: 0.05,
            entry_effect: [0.0; 3],
            markov_export_effect: None,
            machinery_entry_step: Some(0.2),
            write_truth: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    /// Nelder-Mead restarts per start.
    pub restarts: usize,
    pub tol: f64,
    pub ftol: f64,
    pub max_iter: usize,
    /// Bootstrap replicates; 0 skips the bootstrap.
    pub bootstrap_replicates: usize,
    pub pooling: Pooling,
    pub replicate_mode: ReplicateMode,
    pub interval: IntervalKind,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            tol: 1e-4,
            ftol: 1e-12,
            max_iter: 3000,
            bootstrap_replicates: 200,
            pooling: Pooling::Never,
            replicate_mode: ReplicateMode::TwoStep,
            interval: IntervalKind::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingConfig {
    pub k: usize,
    pub min_horizon: i32,
    pub max_horizon: i32,
    /// DiD bootstrap replicates; 0 reports point estimates only.
    pub bootstrap_replicates: usize,
    /// State variables compared across matched units, one τ_h series each.
    pub outcomes: Vec<StateVariable>,
    pub histogram_bins: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            k: 5,
            min_horizon: -4,
            max_horizon: 4,
            bootstrap_replicates: 200,
            outcomes: vec![StateVariable::OmegaH, StateVariable::OmegaS, StateVariable::OmegaU],
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventStudyConfig {
    pub leads: u32,
    pub lags: u32,
    pub outcomes: Vec<PanelOutcome>,
    pub sample: EventSample,
}

impl Default for EventStudyConfig {
    fn default() -> Self {
        Self {
            leads: 4,
            lags: 4,
            outcomes: vec![
                PanelOutcome::SkillRatio,
                PanelOutcome::SkillPremium,
                PanelOutcome::Skilled,
                PanelOutcome::Unskilled,
            ],
            sample: EventSample::NewExporters,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub price_index_mode: Option<PriceIndexMode>,
    pub k: Option<usize>,
    pub bootstrap_replicates: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative input paths are taken from the config file's directory.
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            cfg.rebase(dir);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut().filter(|q| q.is_relative()) {
                *q = dir.join(&*q);
            }
        };
        let i = &mut self.input;
        for p in [
            &mut i.panel,
            &mut i.price_index,
            &mut i.origin_prices,
            &mut i.io_weights,
            &mut i.output_prices,
            &mut i.oil,
        ] {
            fix(p);
        }
        if self.out.is_relative() {
            self.out = dir.join(&self.out);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(m) = o.price_index_mode {
            self.input.price_index_mode = m;
        }
        if let Some(k) = o.k {
            self.matching.k = k;
        }
        if let Some(b) = o.bootstrap_replicates {
            self.estimate.bootstrap_replicates = b;
            self.matching.bootstrap_replicates = b;
        }
    }

    /// Checks values and that every explicitly referenced input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let i = &self.input;
        let required = |p: &Option<PathBuf>, what: &str| -> Result<(), CliError> {
            if p.is_none() {
                return Err(CliError::Config(format!(
                    "price-index mode {:?} needs input.{what}",
                    i.price_index_mode
                )));
            }
            Ok(())
        };
        match i.price_index_mode {
            PriceIndexMode::WtiProxy => {}
            PriceIndexMode::IoWeighted => {
                required(&i.origin_prices, "origin_prices")?;
                required(&i.io_weights, "io_weights")?;
            }
            PriceIndexMode::Fitted => {
                required(&i.output_prices, "output_prices")?;
                required(&i.oil, "oil")?;
            }
        }
        for p in [&i.panel, &i.price_index, &i.origin_prices, &i.io_weights, &i.output_prices, &i.oil]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(CliError::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if self.matching.k == 0 {
            return Err(CliError::Config("matching.k must be positive".into()));
        }
        if self.matching.min_horizon > self.matching.max_horizon {
            return Err(CliError::Config("matching.min_horizon exceeds max_horizon".into()));
        }
        if self.matching.outcomes.is_empty() || self.event_study.outcomes.is_empty() {
            return Err(CliError::Config("outcome lists must not be empty".into()));
        }
        if self.matching.histogram_bins == 0 {
            return Err(CliError::Config("matching.histogram_bins must be positive".into()));
        }
        if self.event_study.leads < 2 {
            return Err(CliError::Config("event_study.leads must be at least 2".into()));
        }
        if !(self.estimate.tol > 0.0 && self.estimate.ftol > 0.0) {
            return Err(CliError::Config("estimate tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self, stage: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config(format!("stage `{stage}` is stochastic and needs a seed")))
    }
}

pub fn parse_price_mode(s: &str) -> Result<PriceIndexMode, String> {
    match s {
        "wti" => Ok(PriceIndexMode::WtiProxy),
        "io" => Ok(PriceIndexMode::IoWeighted),
        "fitted" => Ok(PriceIndexMode::Fitted),
        other => Err(format!("unknown price-index mode `{other}` (expected wti, io or fitted)")),
    }
}
