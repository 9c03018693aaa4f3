//! Run manifest: one TOML file, every field optional, defaults from the
//! MICEX experiment.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::backtest::{BacktestConfig, DataSchema, MissingPolicy, RegimeTiming};
use crate::error::ModelError;
use crate::estimation::{EstimationConfig, TransitionRefresh, VolatilityMeasure};
use crate::market_model::{MarketModel, RegimeParameters};
use crate::markov_chain::TransitionMatrix;
use crate::mpc_controller::{ConstraintMode, ConstraintSpec};
use crate::synthetic::SyntheticMarket;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    /// Seed for synthetic data; the backtest itself is deterministic.
    pub seed: u64,
    pub data: DataSection,
    pub output: OutputSection,
    pub controller: ControllerSection,
    pub market: MarketSection,
    pub estimation: EstimationSection,
    pub simulate: SimulateSection,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataSection::default(),
            output: OutputSection::default(),
            controller: ControllerSection::default(),
            market: MarketSection::default(),
            estimation: EstimationSection::default(),
            simulate: SimulateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub prices: Option<PathBuf>,
    pub date_column: String,
    pub index_column: String,
    pub assets: Option<Vec<String>>,
    /// Forward-fill empty cells instead of rejecting the file.
    pub lenient: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            prices: None,
            date_column: "date".into(),
            index_column: "index".into(),
            assets: None,
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    #[default]
    FirstBlock,
    FullHorizon,
}

impl From<ModeName> for ConstraintMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::FirstBlock => ConstraintMode::FirstBlock,
            ModeName::FullHorizon => ConstraintMode::FullHorizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: usize,
    pub rho: f64,
    /// Diagonal of `R`.
    pub control_cost: f64,
    pub mu0: f64,
    pub initial_wealth: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma_riskfree: f64,
    pub gamma_borrowing: f64,
    pub constraint_mode: ModeName,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            rho: 0.1,
            control_cost: 1e-4,
            mu0: 0.0015,
            initial_wealth: 1.0,
            beta: -0.6,
            gamma: 3.0,
            gamma_riskfree: 3.0,
            gamma_borrowing: 3.0,
            constraint_mode: ModeName::FirstBlock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    pub lending_rate: f64,
    pub borrowing_rate: f64,
    /// Proportional cost applied to every asset.
    pub cost: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            lending_rate: 0.0,
            borrowing_rate: 0.0,
            cost: 0.0006,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VolMeasureName {
    #[default]
    AbsoluteReturn,
    RollingStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshName {
    #[default]
    BeforeTracking,
    Daily,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimingName {
    #[default]
    SameDay,
    PreviousDay,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub vol_threshold: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub ma_window: usize,
    pub mle_window: usize,
    pub vol_measure: VolMeasureName,
    pub rolling_window: usize,
    pub refresh: RefreshName,
    pub regime_timing: TimingName,
}

impl Default for EstimationSection {
    fn default() -> Self {
        let e = EstimationConfig::default();
        Self {
            vol_threshold: e.vol_threshold,
            sigma_low: e.sigma_low,
            sigma_high: e.sigma_high,
            ma_window: e.ma_window,
            mle_window: e.mle_window,
            vol_measure: VolMeasureName::AbsoluteReturn,
            rolling_window: 5,
            refresh: RefreshName::BeforeTracking,
            regime_timing: TimingName::SameDay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub days: usize,
    pub assets: usize,
    pub initial_price: f64,
    /// Daily mean return per regime, shared by all assets.
    pub mu: Vec<f64>,
    /// Daily volatility per regime, shared by all assets.
    pub vol: Vec<f64>,
    pub index_vol: Vec<f64>,
    /// Random-sign index move per regime, added to the index noise.
    pub index_jump: Vec<f64>,
    /// Transition matrix as rows of the printed matrix; column `j` holds
    /// the probabilities of leaving regime `j`.
    pub transition: Vec<Vec<f64>>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            days: 800,
            assets: 5,
            initial_price: 100.0,
            mu: vec![0.001, -0.0005],
            vol: vec![0.01, 0.02],
            index_vol: vec![0.01, 0.02],
            index_jump: vec![0.0, 0.0],
            transition: vec![vec![0.96, 0.24], vec![0.04, 0.76]],
        }
    }
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads a manifest; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let mut m = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &m.data.prices {
            if p.is_relative() {
                m.data.prices = Some(base.join(p));
            }
        }
        if m.output.dir.is_relative() {
            m.output.dir = base.join(&m.output.dir);
        }
        Ok(m)
    }

    pub fn schema(&self) -> DataSchema {
        DataSchema {
            date_column: self.data.date_column.clone(),
            index_column: self.data.index_column.clone(),
            asset_columns: self.data.assets.clone(),
            missing: if self.data.lenient {
                MissingPolicy::ForwardFill
            } else {
                MissingPolicy::Reject
            },
        }
    }

    pub fn estimation_config(&self) -> EstimationConfig {
        let e = &self.estimation;
        EstimationConfig {
            vol_threshold: e.vol_threshold,
            sigma_low: e.sigma_low,
            sigma_high: e.sigma_high,
            ma_window: e.ma_window,
            mle_window: e.mle_window,
            vol_measure: match e.vol_measure {
                VolMeasureName::AbsoluteReturn => VolatilityMeasure::AbsoluteReturn,
                VolMeasureName::RollingStd => VolatilityMeasure::RollingStd { window: e.rolling_window },
            },
            refresh: match e.refresh {
                RefreshName::BeforeTracking => TransitionRefresh::BeforeTracking,
                RefreshName::Daily => TransitionRefresh::Daily,
            },
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.backtest_config(1)?.validate(1)?;
        let c = &self.controller;
        if c.horizon == 0 {
            return Err(ModelError::invalid("prediction horizon", "must be at least 1"));
        }
        if !(c.rho > 0.0) {
            return Err(ModelError::invalid("rho", "must be positive"));
        }
        if !(c.control_cost > 0.0) {
            return Err(ModelError::invalid("control cost", "must be positive"));
        }
        if !(c.mu0 > -1.0) {
            return Err(ModelError::invalid("benchmark growth", "must exceed -1"));
        }
        Ok(())
    }

    /// Backtest settings for a table with `n` assets.
    pub fn backtest_config(&self, n: usize) -> Result<BacktestConfig, ModelError> {
        let c = &self.controller;
        let mut gamma = DVector::from_element(n + 2, c.gamma);
        gamma[n] = c.gamma_riskfree;
        gamma[n + 1] = c.gamma_borrowing;
        let constraints = ConstraintSpec::new(DVector::from_element(n, c.beta), gamma, c.constraint_mode.into())?;
        Ok(BacktestConfig {
            costs: DVector::from_element(n, self.market.cost),
            constraints,
            horizon: c.horizon,
            control_cost: c.control_cost,
            rho: c.rho,
            mu0: c.mu0,
            estimation: self.estimation_config(),
            initial_wealth: c.initial_wealth,
            lending_rate: self.market.lending_rate,
            borrowing_rate: self.market.borrowing_rate,
            regime_timing: match self.estimation.regime_timing {
                TimingName::SameDay => RegimeTiming::SameDay,
                TimingName::PreviousDay => RegimeTiming::PreviousDay,
            },
        })
    }

    pub fn synthetic_market(&self) -> Result<SyntheticMarket, ModelError> {
        let s = &self.simulate;
        let v = s.transition.len();
        if v == 0 || s.transition.iter().any(|r| r.len() != v) {
            return Err(ModelError::invalid("transition matrix", "must be square and non-empty"));
        }
        ModelError::check_dim("regime means", v, s.mu.len())?;
        ModelError::check_dim("regime volatilities", v, s.vol.len())?;
        if s.assets == 0 {
            return Err(ModelError::invalid("asset count", "must be at least 1"));
        }
        let flat: Vec<f64> = s.transition.iter().flatten().copied().collect();
        let chain = TransitionMatrix::new(DMatrix::from_row_slice(v, v, &flat))?;
        let regimes = (0..v)
            .map(|q| RegimeParameters::diagonal(DVector::from_element(s.assets, s.mu[q]), s.vol[q]))
            .collect::<Result<_, _>>()?;
        let model = MarketModel::new(regimes, self.market.lending_rate, self.market.borrowing_rate)?;
        let mut market = SyntheticMarket::new(model, chain, s.index_vol.clone())?;
        ModelError::check_dim("index jumps", v, s.index_jump.len())?;
        market.index_jump = s.index_jump.clone();
        market.initial_price = s.initial_price;
        Ok(market)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_gives_paper_defaults() {
        let m = RunManifest::from_toml("").unwrap();
        let cfg = m.backtest_config(3).unwrap();
        let paper = BacktestConfig::paper_defaults(3).unwrap();
        assert_eq!(cfg, paper);
    }

    #[test]
    fn sections_override_defaults() {
        let m = RunManifest::from_toml(
            "seed = 7\n[controller]\nhorizon = 4\nconstraint_mode = \"full-horizon\"\n[estimation]\nrefresh = \"daily\"\n",
        )
        .unwrap();
        assert_eq!(m.seed, 7);
        let cfg = m.backtest_config(2).unwrap();
        assert_eq!(cfg.horizon, 4);
        assert_eq!(cfg.constraints.mode(), ConstraintMode::FullHorizon);
        assert_eq!(cfg.estimation.refresh, TransitionRefresh::Daily);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunManifest::from_toml("[controller]\nhorizn = 3\n").is_err());
    }

    #[test]
    fn beta_above_gamma_fails_validation() {
        let m = RunManifest::from_toml("[controller]\nbeta = 4.0\n").unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn default_synthetic_market_is_valid() {
        let market = RunManifest::default().synthetic_market().unwrap();
        assert_eq!(market.model.assets(), 5);
        assert_eq!(market.chain.matrix()[(1, 0)], 0.04);
    }
}
