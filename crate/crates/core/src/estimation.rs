//! Parameter pipeline: volatility-regime classification of a reference
//! index, moving-average expected returns and per-regime diagonal
//! volatilities. Cross-asset correlation is not estimated.

use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;
use crate::markov_chain::RegimeSequence;

/// How the daily volatility of the index is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VolatilityMeasure {
    /// Absolute daily simple return.
    #[default]
    AbsoluteReturn,
    /// Standard deviation of the trailing `window` returns, including today.
    RollingStd { window: usize },
}

/// When the transition matrix is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitionRefresh {
    /// Once, from the window immediately preceding the tracking period.
    #[default]
    BeforeTracking,
    /// Re-estimated every day over the trailing window.
    Daily,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub vol_threshold: f64,
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub ma_window: usize,
    pub mle_window: usize,
    pub vol_measure: VolatilityMeasure,
    pub refresh: TransitionRefresh,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            vol_threshold: 0.015,
            sigma_low: 0.01,
            sigma_high: 0.02,
            ma_window: 13,
            mle_window: 200,
            vol_measure: VolatilityMeasure::AbsoluteReturn,
            refresh: TransitionRefresh::BeforeTracking,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.vol_threshold > 0.0) || !self.vol_threshold.is_finite() {
            return Err(ModelError::invalid("volatility threshold", "must be positive"));
        }
        if !(self.sigma_low > 0.0 && self.sigma_low < self.sigma_high) || !self.sigma_high.is_finite() {
            return Err(ModelError::invalid(
                "regime volatilities",
                format!("need 0 < {} < {}", self.sigma_low, self.sigma_high),
            ));
        }
        if self.ma_window == 0 {
            return Err(ModelError::invalid("moving-average window", "must be at least 1"));
        }
        // three closes give two returns, i.e. one transition
        if self.mle_window < 3 {
            return Err(ModelError::invalid("transition estimation window", "must be at least 3 closes"));
        }
        if let VolatilityMeasure::RollingStd { window } = self.vol_measure {
            if window < 2 {
                return Err(ModelError::invalid("rolling volatility window", "must be at least 2"));
            }
        }
        Ok(())
    }
}

/// Simple returns `p[k] / p[k-1] - 1`; one shorter than the input.
pub fn simple_returns(prices: &[f64]) -> Vec<f64> {
    prices.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

fn volatility_series(returns: &[f64], measure: VolatilityMeasure) -> Vec<f64> {
    match measure {
        VolatilityMeasure::AbsoluteReturn => returns.iter().map(|r| r.abs()).collect(),
        VolatilityMeasure::RollingStd { window } => (0..returns.len())
            .map(|k| {
                let lo = (k + 1).saturating_sub(window);
                let slice = &returns[lo..=k];
                if slice.len() < 2 {
                    return slice[0].abs();
                }
                let mean = slice.iter().sum::<f64>() / slice.len() as f64;
                let var = slice.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (slice.len() - 1) as f64;
                var.sqrt()
            })
            .collect(),
    }
}

/// Regime 0 (low volatility) when the measured volatility is strictly below
/// the threshold, regime 1 otherwise.
pub fn classify_regimes(index_returns: &[f64], cfg: &EstimationConfig) -> Result<RegimeSequence, ModelError> {
    if index_returns.is_empty() {
        return Err(ModelError::InsufficientHistory { needed: 1, available: 0 });
    }
    let states = volatility_series(index_returns, cfg.vol_measure)
        .into_iter()
        .map(|vol| usize::from(vol >= cfg.vol_threshold))
        .collect();
    RegimeSequence::new(states, 2)
}

/// Mean of the last `window` simple returns of each asset using only prices
/// with index `< k`. `prices` is a `T x n` table of closes.
pub fn expected_returns(prices: &DMatrix<f64>, window: usize, k: usize) -> Result<DVector<f64>, ModelError> {
    if window == 0 {
        return Err(ModelError::invalid("moving-average window", "must be at least 1"));
    }
    let available = k.min(prices.nrows());
    if available < window + 1 {
        return Err(ModelError::InsufficientHistory {
            needed: window + 1,
            available,
        });
    }
    let first = k - window - 1;
    let n = prices.ncols();
    let mut mu = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for d in first + 1..k {
            acc += prices[(d, i)] / prices[(d - 1, i)] - 1.0;
        }
        mu[i] = acc / window as f64;
    }
    Ok(mu)
}

/// Diagonal volatility matrices `[sigma_low I, sigma_high I]`.
pub fn regime_volatilities(cfg: &EstimationConfig, n: usize) -> [DMatrix<f64>; 2] {
    [
        DMatrix::from_diagonal_element(n, n, cfg.sigma_low),
        DMatrix::from_diagonal_element(n, n, cfg.sigma_high),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn classify_examples() {
        let cfg = EstimationConfig::default();
        let seq = classify_regimes(&[0.01, 0.02, -0.02, -0.001], &cfg).unwrap();
        assert_eq!(seq.states(), &[0, 1, 1, 0]);

        let tie = classify_regimes(&[0.015, -0.015], &cfg).unwrap();
        assert_eq!(tie.states(), &[1, 1]);

        let quiet = classify_regimes(&[0.0; 5], &cfg).unwrap();
        assert_eq!(quiet.states(), &[0; 5]);

        assert!(classify_regimes(&[], &cfg).is_err());
    }

    #[test]
    fn rolling_std_measure() {
        let cfg = EstimationConfig {
            vol_measure: VolatilityMeasure::RollingStd { window: 3 },
            ..EstimationConfig::default()
        };
        // alternating +-2% has a sample std above 1.5%
        let seq = classify_regimes(&[0.001, 0.02, -0.02, 0.02, 0.001], &cfg).unwrap();
        assert_eq!(seq.states()[3], 1);
        assert_eq!(seq.states()[0], 0);
    }

    #[test]
    fn expected_returns_examples() {
        let flat = DMatrix::from_element(20, 3, 50.0);
        assert_eq!(expected_returns(&flat, 13, 20).unwrap(), DVector::zeros(3));

        let p = DMatrix::from_column_slice(3, 1, &[100.0, 101.0, 102.01]);
        assert_abs_diff_eq!(expected_returns(&p, 2, 3).unwrap()[0], 0.01, epsilon = 1e-14);

        let long = DMatrix::from_fn(40, 2, |r, c| 10.0 + (r * (c + 1)) as f64);
        assert!(expected_returns(&long, 13, 30).is_ok());
        assert!(expected_returns(&long, 21, 30).is_ok());
        assert!(matches!(
            expected_returns(&long, 21, 21),
            Err(ModelError::InsufficientHistory { needed: 22, available: 21 })
        ));
    }

    #[test]
    fn regime_volatility_presets() {
        for (lo, hi) in [(0.01, 0.02), (0.005, 0.02), (0.004, 0.008)] {
            let cfg = EstimationConfig { sigma_low: lo, sigma_high: hi, ..EstimationConfig::default() };
            let [a, b] = regime_volatilities(&cfg, 3);
            assert_eq!(a, DMatrix::from_diagonal_element(3, 3, lo));
            assert_eq!(b, DMatrix::from_diagonal_element(3, 3, hi));
        }
    }

    #[test]
    fn validation() {
        assert!(EstimationConfig::default().validate().is_ok());
        let bad = EstimationConfig { sigma_low: 0.03, ..EstimationConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EstimationConfig { ma_window: 0, ..EstimationConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn classification_is_scale_consistent(
            returns in proptest::collection::vec(-0.05f64..0.05, 1..60),
            scale in prop_oneof![Just(0.5f64), Just(2.0), Just(4.0), Just(0.25)],
        ) {
            let cfg = EstimationConfig::default();
            let scaled_cfg = EstimationConfig { vol_threshold: cfg.vol_threshold * scale, ..cfg.clone() };
            let scaled: Vec<f64> = returns.iter().map(|r| r * scale).collect();
            prop_assert_eq!(classify_regimes(&returns, &cfg).unwrap(), classify_regimes(&scaled, &scaled_cfg).unwrap());
        }

        #[test]
        fn expected_returns_are_causal(
            base in proptest::collection::vec(50.0f64..150.0, 30),
            k in 15usize..30,
            bump in 0.5f64..2.0,
        ) {
            let p = DMatrix::from_column_slice(30, 1, &base);
            let before = expected_returns(&p, 13, k).unwrap();
            let mut changed = p.clone();
            for d in k..30 {
                changed[(d, 0)] *= bump;
            }
            prop_assert_eq!(before, expected_returns(&changed, 13, k).unwrap());
        }

        #[test]
        fn constant_return_series_is_recovered(r in -0.02f64..0.02, window in 1usize..25) {
            let len = window + 5;
            let p = DMatrix::from_fn(len, 1, |d, _| 100.0 * (1.0 + r).powi(d as i32));
            let mu = expected_returns(&p, window, len).unwrap();
            prop_assert!((mu[0] - r).abs() < 1e-12);
        }
    }
}
