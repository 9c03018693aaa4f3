//! Seeded regime-switching market generator.
//!
//! Closes follow `p(d) = p(d-1) (1 + eta(d))` with
//! `eta(d) = mu^(q) + sigma^(q) w(d)` and `q` the regime at close `d`. The
//! reference index moves by a random-sign jump of regime-dependent size
//! plus regime-dependent Gaussian noise, so that volatility-threshold
//! classification sees the same regimes.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backtest::PriceTable;
use crate::error::ModelError;
use crate::market_model::MarketModel;
use crate::markov_chain::TransitionMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarket {
    pub model: MarketModel,
    pub chain: TransitionMatrix,
    /// Index volatility per regime.
    pub index_vol: Vec<f64>,
    /// Size of the random-sign index move per regime.
    pub index_jump: Vec<f64>,
    pub initial_price: f64,
    /// Regime of the first close; `None` draws it from the stationary law.
    pub initial_regime: Option<usize>,
    pub start_date: NaiveDate,
}

impl SyntheticMarket {
    pub fn new(model: MarketModel, chain: TransitionMatrix, index_vol: Vec<f64>) -> Result<Self, ModelError> {
        ModelError::check_dim("market regimes", chain.regimes(), model.regime_count())?;
        ModelError::check_dim("index volatilities", chain.regimes(), index_vol.len())?;
        if index_vol.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(ModelError::invalid("index volatility", "must be non-negative"));
        }
        Ok(Self {
            model,
            chain,
            index_jump: vec![0.0; index_vol.len()],
            index_vol,
            initial_price: 100.0,
            initial_regime: None,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPath {
    pub table: PriceTable,
    /// Regime of every close.
    pub regimes: Vec<usize>,
}

/// Weekdays from `start` onward.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

/// Generates `days` closes. Identical `(market, days, seed)` give identical paths.
pub fn simulate_market(market: &SyntheticMarket, days: usize, seed: u64) -> Result<SyntheticPath, ModelError> {
    if days == 0 {
        return Err(ModelError::invalid("simulation length", "need at least one day"));
    }
    ModelError::check_dim("index jumps", market.chain.regimes(), market.index_jump.len())?;
    if !(market.initial_price > 0.0) {
        return Err(ModelError::invalid("initial price", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = market.chain.regimes();
    let first = match market.initial_regime {
        Some(q) if q < v => q,
        Some(q) => return Err(ModelError::IndexOutOfRange { what: "initial regime", index: q, limit: v }),
        None => {
            let pi = market.chain.stationary_distribution()?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            pi.iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(v - 1)
        }
    };
    let n = market.model.assets();
    let mut regimes = Vec::with_capacity(days);
    let mut closes = DMatrix::zeros(days, n);
    let mut index = Vec::with_capacity(days);
    regimes.push(first);
    closes.row_mut(0).fill(market.initial_price);
    index.push(market.initial_price * 10.0);
    for d in 1..days {
        let q = market.chain.successor(regimes[d - 1], rng.random());
        regimes.push(q);
        let params = &market.model.regimes()[q];
        let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = params.mu() + params.sigma() * w;
        for i in 0..n {
            closes[(d, i)] = closes[(d - 1, i)] * (1.0 + eta[i]);
        }
        let z: f64 = rng.sample(StandardNormal);
        let jump = match market.index_jump[q] {
            0.0 => 0.0,
            size if rng.random_bool(0.5) => size,
            size => -size,
        };
        index.push(index[d - 1] * (1.0 + jump + market.index_vol[q] * z));
        if closes.row(d).iter().chain(std::iter::once(&index[d])).any(|p| !(*p > 0.0)) {
            return Err(ModelError::invalid("simulated prices", format!("non-positive close on day {d}")));
        }
    }
    let assets = (1..=n).map(|i| format!("asset_{i}")).collect();
    let table = PriceTable::new(business_days(market.start_date, days), assets, closes, "index", index)
        .map_err(|e| ModelError::invalid("simulated prices", e.to_string()))?;
    Ok(SyntheticPath { table, regimes })
}
