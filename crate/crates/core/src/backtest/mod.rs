//! Daily feedback loop: classify the regime, refresh estimates, solve the
//! receding-horizon QP, realize the next day's returns and charge
//! proportional transaction costs outside the optimizer.

mod data;
mod report;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use data::{format_number, load_prices, read_prices, DataError, DataSchema, MissingPolicy, PriceTable};
pub use report::{metrics, write_ledger, write_metrics, ConstraintViolations, Metrics};

use crate::error::{ModelError, MpcError};
use crate::estimation::{
    classify_regimes, expected_returns, regime_volatilities, simple_returns, EstimationConfig, TransitionRefresh,
};
use crate::market_model::{riskfree_allocation, wealth_step, AllocationVector, MarketModel, RegimeParameters};
use crate::markov_chain::{estimate_transition_matrix, RegimeIndicator, RegimeSequence, TransitionMatrix};
use crate::mpc_controller::{solve_step, Benchmark, ConstraintSpec, PredictionConfig, StepInputs};

/// `V0(k) = V0_init (1 + mu0)^k` for `k` in `0..len`, by repeated multiplication.
pub fn benchmark_series(initial: f64, mu0: f64, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut v = initial;
    for _ in 0..len {
        out.push(v);
        v *= 1.0 + mu0;
    }
    out
}

/// Next-day wealth with proportional costs on the change in risky holdings.
/// Returns `(V(k+1), cost)`.
pub fn wealth_with_costs(
    model: &MarketModel,
    v: f64,
    u_new: &AllocationVector,
    u_prev: &AllocationVector,
    eta: &DVector<f64>,
    costs: &DVector<f64>,
) -> Result<(f64, f64), ModelError> {
    ModelError::check_dim("cost fractions", model.assets(), costs.len())?;
    ModelError::check_dim("previous allocation", u_new.assets(), u_prev.assets())?;
    let cost = transaction_cost(u_new, u_prev, costs);
    Ok((wealth_step(model, v, u_new, eta)? - cost, cost))
}

fn transaction_cost(u_new: &AllocationVector, u_prev: &AllocationVector, costs: &DVector<f64>) -> f64 {
    u_new
        .risky()
        .iter()
        .zip(u_prev.risky().iter())
        .zip(costs.iter())
        .map(|((a, b), c)| c * (a - b).abs())
        .sum()
}

fn turnover(u_new: &AllocationVector, u_prev: &AllocationVector) -> f64 {
    u_new.risky().iter().zip(u_prev.risky().iter()).map(|(a, b)| (a - b).abs()).sum()
}

/// Which close's index return identifies the regime at a decision day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegimeTiming {
    /// Day `k`'s own return.
    #[default]
    SameDay,
    /// Day `k - 1`'s return.
    PreviousDay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    /// Proportional cost `c_i` per asset.
    pub costs: DVector<f64>,
    pub constraints: ConstraintSpec,
    pub horizon: usize,
    /// `R = control_cost * I`.
    pub control_cost: f64,
    pub rho: f64,
    pub mu0: f64,
    pub estimation: EstimationConfig,
    pub initial_wealth: f64,
    pub lending_rate: f64,
    pub borrowing_rate: f64,
    pub regime_timing: RegimeTiming,
}

impl BacktestConfig {
    /// The MICEX run: `m = 10`, `rho = 0.1`, `R = 1e-4 I`, `mu0 = 0.0015`,
    /// `beta = -0.6`, `gamma = 3`, `c = 0.0006`, `r1 = r2 = 0`, `V(0) = 1`.
    pub fn paper_defaults(n: usize) -> Result<Self, ModelError> {
        Ok(Self {
            costs: DVector::from_element(n, 0.0006),
            constraints: ConstraintSpec::uniform(n, -0.6, 3.0, Default::default())?,
            horizon: 10,
            control_cost: 1e-4,
            rho: 0.1,
            mu0: 0.0015,
            estimation: EstimationConfig::default(),
            initial_wealth: 1.0,
            lending_rate: 0.0,
            borrowing_rate: 0.0,
            regime_timing: RegimeTiming::SameDay,
        })
    }

    pub fn validate(&self, n: usize) -> Result<(), ModelError> {
        ModelError::check_dim("cost fractions", n, self.costs.len())?;
        ModelError::check_dim("constraint assets", n, self.constraints.assets())?;
        if self.costs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(ModelError::invalid("cost fractions", "must be non-negative"));
        }
        if !(self.initial_wealth > 0.0) || !self.initial_wealth.is_finite() {
            return Err(ModelError::invalid("initial wealth", "must be positive"));
        }
        if !(self.lending_rate <= self.borrowing_rate) {
            return Err(ModelError::invalid("interest rates", "lending rate exceeds borrowing rate"));
        }
        self.estimation.validate()
    }
}

/// Where the controller's model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ParameterSource {
    /// Classified regimes, transition MLE and moving-average means from the table.
    Estimated,
    /// True parameters and the regime of every close (`regimes.len() == T`).
    /// Tracking starts at the first close.
    Known {
        model: MarketModel,
        chain: TransitionMatrix,
        regimes: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub date: NaiveDate,
    /// Realized wealth at the decision.
    pub v: f64,
    pub v0: f64,
    /// Applied allocation `[u_1, ..., u_n, u_{n+1}]`.
    pub u: AllocationVector,
    /// Risk-free holding implied by the budget.
    pub u0: f64,
    /// 0-based regime observed at the decision.
    pub regime: usize,
    pub turnover: f64,
    /// Cost charged for moving to `u`; deducted from the next day's wealth.
    pub cost_paid: f64,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
}

/// Wealth and target after the final decision has earned its returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terminal {
    pub date: NaiveDate,
    pub v: f64,
    pub v0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub assets: Vec<String>,
    pub regimes: usize,
    pub constraints: ConstraintSpec,
    pub rows: Vec<LedgerRow>,
    pub terminal: Option<Terminal>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BacktestError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(#[from] ModelError),
    #[error("insufficient history: tracking would start at row {start}, table has {rows} rows")]
    Warmup { start: usize, rows: usize },
    #[error("on {date}: {source}")]
    Step {
        date: NaiveDate,
        #[source]
        source: MpcError,
    },
    #[error("bankrupt on {date}: wealth {wealth}")]
    Bankruptcy {
        date: NaiveDate,
        wealth: f64,
        ledger: Box<Ledger>,
    },
}

/// Runs the controller on estimated parameters.
pub fn run(table: &PriceTable, cfg: &BacktestConfig) -> Result<Ledger, BacktestError> {
    run_with(table, cfg, &ParameterSource::Estimated)
}

struct Estimated {
    regimes: Vec<Option<usize>>,
    sigmas: [DMatrix<f64>; 2],
}

impl Estimated {
    fn new(table: &PriceTable, cfg: &BacktestConfig) -> Result<Self, ModelError> {
        let index_returns = simple_returns(table.index());
        let classes = classify_regimes(&index_returns, &cfg.estimation)?;
        let lag = usize::from(cfg.regime_timing == RegimeTiming::PreviousDay);
        // close d has a return from d-1; its regime uses return d - lag
        let regimes = (0..table.len())
            .map(|d| (d > lag).then(|| classes.states()[d - 1 - lag]))
            .collect();
        Ok(Self {
            regimes,
            sigmas: regime_volatilities(&cfg.estimation, table.assets().len()),
        })
    }

    /// Transition MLE over the closes `end + 1 - window ..= end`.
    fn chain(&self, end: usize, window: usize) -> Result<TransitionMatrix, ModelError> {
        let states: Vec<usize> = (end + 1 - window..=end).filter_map(|d| self.regimes[d]).collect();
        let est = estimate_transition_matrix(&RegimeSequence::new(states, 2)?, 2)?;
        Ok(est.matrix)
    }

    fn model(&self, table: &PriceTable, cfg: &BacktestConfig, d: usize) -> Result<MarketModel, ModelError> {
        let mu = expected_returns(table.closes(), cfg.estimation.ma_window, d + 1)?;
        let regimes = self
            .sigmas
            .iter()
            .map(|s| RegimeParameters::new(mu.clone(), s.clone()))
            .collect::<Result<_, _>>()?;
        MarketModel::new(regimes, cfg.lending_rate, cfg.borrowing_rate)
    }
}

/// First decision row under estimated parameters.
pub fn warmup_rows(cfg: &BacktestConfig) -> usize {
    let lag = usize::from(cfg.regime_timing == RegimeTiming::PreviousDay);
    cfg.estimation
        .mle_window
        .max(cfg.estimation.ma_window)
        .max(1)
        + lag
}

/// Decisions are taken at closes `s ..= T-2`, each earning the next close's
/// returns; the tracking clock reads `k = d - s`.
pub fn run_with(table: &PriceTable, cfg: &BacktestConfig, source: &ParameterSource) -> Result<Ledger, BacktestError> {
    let n = table.assets().len();
    cfg.validate(n)?;
    let t_len = table.len();
    let estimated = match source {
        ParameterSource::Estimated => Some(Estimated::new(table, cfg)?),
        ParameterSource::Known { model, chain, regimes } => {
            ModelError::check_dim("known regimes", t_len, regimes.len())?;
            ModelError::check_dim("known model assets", n, model.assets())?;
            ModelError::check_dim("known model regimes", chain.regimes(), model.regime_count())?;
            if let Some(q) = regimes.iter().find(|q| **q >= chain.regimes()) {
                return Err(ModelError::IndexOutOfRange { what: "regime", index: *q, limit: chain.regimes() }.into());
            }
            None
        }
    };
    let start = if estimated.is_some() { warmup_rows(cfg) } else { 0 };
    if start + 2 > t_len {
        return Err(BacktestError::Warmup { start, rows: t_len });
    }

    let steps = t_len - 1 - start;
    let benchmark = Benchmark::geometric(cfg.initial_wealth, cfg.mu0, steps + cfg.horizon + 1)?;
    let prediction = PredictionConfig::diagonal(cfg.horizon, n, cfg.control_cost, cfg.rho, benchmark.clone())?;
    let regime_count = match source {
        ParameterSource::Known { chain, .. } => chain.regimes(),
        ParameterSource::Estimated => 2,
    };

    let fixed_chain = match (&estimated, cfg.estimation.refresh) {
        (Some(e), TransitionRefresh::BeforeTracking) => Some(e.chain(start - 1, cfg.estimation.mle_window)?),
        _ => None,
    };

    let mut ledger = Ledger {
        assets: table.assets().to_vec(),
        regimes: regime_count,
        constraints: cfg.constraints.clone(),
        rows: Vec::with_capacity(steps),
        terminal: None,
    };
    let mut v = cfg.initial_wealth;
    let mut u_prev = AllocationVector::cash(n);

    for d in start..t_len - 1 {
        let k = d - start;
        let date = table.dates()[d];
        if !(v > 0.0) {
            return Err(BacktestError::Bankruptcy { date, wealth: v, ledger: Box::new(ledger) });
        }
        let (model, chain, regime) = match (source, &estimated) {
            (ParameterSource::Known { model, chain, regimes }, _) => (model.clone(), chain.clone(), regimes[d]),
            (ParameterSource::Estimated, Some(e)) => {
                let chain = match &fixed_chain {
                    Some(c) => c.clone(),
                    None => e.chain(d, cfg.estimation.mle_window)?,
                };
                let regime = e.regimes[d].expect("warm-up covers the regime lag");
                (e.model(table, cfg, d)?, chain, regime)
            }
            (ParameterSource::Estimated, None) => unreachable!(),
        };
        let theta = RegimeIndicator::observed(chain.regimes(), regime)?;
        let inputs = StepInputs {
            chain: &chain,
            theta: &theta,
            model: &model,
            config: &prediction,
            k,
        };
        let decision =
            solve_step(&inputs, &cfg.constraints, v).map_err(|source| BacktestError::Step { date, source })?;
        let u = decision.allocation;

        let eta = table.asset_returns(d + 1);
        let (v_next, cost) = wealth_with_costs(&model, v, &u, &u_prev, &eta, &cfg.costs)?;
        ledger.rows.push(LedgerRow {
            date,
            v,
            v0: benchmark.value(k),
            u0: riskfree_allocation(v, &u),
            regime,
            turnover: turnover(&u, &u_prev),
            cost_paid: cost,
            qp_iterations: decision.solution.iterations,
            kkt_residual: decision.solution.kkt_residual,
            u: u.clone(),
        });
        u_prev = u;
        v = v_next;
    }
    ledger.terminal = Some(Terminal {
        date: table.dates()[t_len - 1],
        v,
        v0: benchmark.value(steps),
    });
    if !(v > 0.0) {
        return Err(BacktestError::Bankruptcy {
            date: table.dates()[t_len - 1],
            wealth: v,
            ledger: Box::new(ledger),
        });
    }
    Ok(ledger)
}

/// Replays a ledger's decisions on the table's returns with other cost
/// fractions; returns the wealth after each decision.
pub fn replay_with_costs(
    table: &PriceTable,
    ledger: &Ledger,
    lending_rate: f64,
    borrowing_rate: f64,
    costs: &DVector<f64>,
) -> Result<Vec<f64>, ModelError> {
    let n = table.assets().len();
    let market = MarketModel::new(
        vec![RegimeParameters::diagonal(DVector::zeros(n), 0.0)?],
        lending_rate,
        borrowing_rate,
    )?;
    let Some(first) = ledger.rows.first() else {
        return Ok(Vec::new());
    };
    let start = table
        .dates()
        .iter()
        .position(|d| *d == first.date)
        .ok_or_else(|| ModelError::invalid("ledger", "first date not in table"))?;
    let mut v = first.v;
    let mut prev = AllocationVector::cash(n);
    let mut out = Vec::with_capacity(ledger.rows.len());
    for (i, row) in ledger.rows.iter().enumerate() {
        let eta = table.asset_returns(start + i + 1);
        v = wealth_with_costs(&market, v, &row.u, &prev, &eta, costs)?.0;
        prev = row.u.clone();
        out.push(v);
    }
    Ok(out)
}
