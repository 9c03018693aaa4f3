//! Regime-modulated return model and self-financing wealth dynamics.
//!
//! Returns are simple per-period returns
//! `eta(k) = mu(q) + sigma(q) w(k)` with `q` the regime active at `k`.
//! Controls are amounts of money: `u = [u_1 .. u_n, u_{n+1}]` where the last
//! entry is the borrowed amount. The risk-free holding is implied by the
//! budget identity `V = sum(u_i) + u_0 - u_{n+1}`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::ModelError;
use crate::markov_chain::RegimeSequence;

/// Expected returns and volatility matrix of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeParameters {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl RegimeParameters {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self, ModelError> {
        let n = mu.len();
        if n == 0 {
            return Err(ModelError::invalid("regime parameters", "no assets"));
        }
        ModelError::check_dim("volatility rows", n, sigma.nrows())?;
        ModelError::check_dim("volatility columns", n, sigma.ncols())?;
        if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(ModelError::invalid("regime parameters", "non-finite entry"));
        }
        Ok(Self { mu, sigma })
    }

    /// Diagonal volatility with a common level for every asset.
    pub fn diagonal(mu: DVector<f64>, vol: f64) -> Result<Self, ModelError> {
        let n = mu.len();
        Self::new(mu, DMatrix::from_diagonal_element(n, n, vol))
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn assets(&self) -> usize {
        self.mu.len()
    }
}

/// Per-regime return parameters plus lending and borrowing rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    regimes: Vec<RegimeParameters>,
    r1: f64,
    r2: f64,
}

impl MarketModel {
    pub fn new(regimes: Vec<RegimeParameters>, r1: f64, r2: f64) -> Result<Self, ModelError> {
        let Some(first) = regimes.first() else {
            return Err(ModelError::invalid("market model", "no regimes"));
        };
        let n = first.assets();
        for r in &regimes {
            ModelError::check_dim("regime asset count", n, r.assets())?;
        }
        if !r1.is_finite() || !r2.is_finite() {
            return Err(ModelError::invalid("interest rates", "non-finite"));
        }
        if r1 > r2 {
            return Err(ModelError::invalid(
                "interest rates",
                format!("lending rate {r1} exceeds borrowing rate {r2}"),
            ));
        }
        Ok(Self { regimes, r1, r2 })
    }

    pub fn assets(&self) -> usize {
        self.regimes[0].assets()
    }

    pub fn regime_count(&self) -> usize {
        self.regimes.len()
    }

    pub fn regime(&self, q: usize) -> Result<&RegimeParameters, ModelError> {
        self.regimes.get(q).ok_or(ModelError::IndexOutOfRange {
            what: "regime",
            index: q,
            limit: self.regimes.len(),
        })
    }

    pub fn regimes(&self) -> &[RegimeParameters] {
        &self.regimes
    }

    pub fn lending_rate(&self) -> f64 {
        self.r1
    }

    pub fn borrowing_rate(&self) -> f64 {
        self.r2
    }

    /// Wealth growth factor of cash, `1 + r1`.
    pub fn growth_factor(&self) -> f64 {
        1.0 + self.r1
    }
}

/// Money amounts in each risky asset followed by the borrowed amount.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationVector {
    u: DVector<f64>,
}

impl AllocationVector {
    pub fn new(u: DVector<f64>) -> Result<Self, ModelError> {
        if u.len() < 2 {
            return Err(ModelError::invalid("allocation", "needs at least one asset and the borrowing slot"));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::invalid("allocation", "non-finite entry"));
        }
        Ok(Self { u })
    }

    /// All-cash allocation for `n` assets.
    pub fn cash(n: usize) -> Self {
        Self {
            u: DVector::zeros(n + 1),
        }
    }

    pub fn assets(&self) -> usize {
        self.u.len() - 1
    }

    pub fn risky(&self) -> nalgebra::DVectorView<'_, f64> {
        self.u.rows(0, self.assets())
    }

    pub fn borrowing(&self) -> f64 {
        self.u[self.assets()]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.u
    }
}

fn check_regime(model: &MarketModel, q: usize) -> Result<&RegimeParameters, ModelError> {
    model.regime(q)
}

/// Excess-return row `[mu_1 - r1, ..., mu_n - r1, r1 - r2]` of regime `q`.
pub fn b0_row(model: &MarketModel, q: usize) -> Result<RowDVector<f64>, ModelError> {
    let params = check_regime(model, q)?;
    let n = params.assets();
    let mut row = RowDVector::zeros(n + 1);
    for i in 0..n {
        row[i] = params.mu[i] - model.r1;
    }
    row[n] = model.r1 - model.r2;
    Ok(row)
}

/// Volatility row `[sigma_1j, ..., sigma_nj, 0]` for noise channel `j` in `1..=n`.
pub fn bj_row(model: &MarketModel, q: usize, j: usize) -> Result<RowDVector<f64>, ModelError> {
    let params = check_regime(model, q)?;
    let n = params.assets();
    if j == 0 || j > n {
        return Err(ModelError::IndexOutOfRange {
            what: "noise channel",
            index: j,
            limit: n,
        });
    }
    let mut row = RowDVector::zeros(n + 1);
    row.columns_mut(0, n).copy_from(&params.sigma.column(j - 1).transpose());
    Ok(row)
}

/// `B_j` row for channel `j` in `0..=n`, where channel 0 is the excess-return row.
pub fn channel_row(model: &MarketModel, q: usize, j: usize) -> Result<RowDVector<f64>, ModelError> {
    if j == 0 {
        b0_row(model, q)
    } else {
        bj_row(model, q, j)
    }
}

/// Realized returns along a regime path given standard noise draws.
pub fn simulate_returns(
    model: &MarketModel,
    regime_path: &RegimeSequence,
    noise: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, ModelError> {
    ModelError::check_dim("noise sequence length", regime_path.len(), noise.len())?;
    let n = model.assets();
    regime_path
        .states()
        .iter()
        .zip(noise)
        .map(|(&q, w)| {
            ModelError::check_dim("noise vector", n, w.len())?;
            let params = model.regime(q)?;
            Ok(&params.mu + &params.sigma * w)
        })
        .collect()
}

fn check_step_inputs(model: &MarketModel, v: f64, u: &AllocationVector, eta: &DVector<f64>) -> Result<(), ModelError> {
    let n = model.assets();
    ModelError::check_dim("allocation", n + 1, u.u.len())?;
    ModelError::check_dim("returns", n, eta.len())?;
    if !v.is_finite() || eta.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::invalid("wealth step", "non-finite input"));
    }
    Ok(())
}

/// Next-period wealth in excess-return form:
/// `(1 + r1) V + sum (eta_i - r1) u_i - (r2 - r1) u_{n+1}`.
pub fn wealth_step(model: &MarketModel, v: f64, u: &AllocationVector, eta: &DVector<f64>) -> Result<f64, ModelError> {
    check_step_inputs(model, v, u, eta)?;
    let r1 = model.r1;
    let excess: f64 = u.risky().iter().zip(eta.iter()).map(|(ui, e)| (e - r1) * ui).sum();
    Ok((1.0 + r1) * v + excess - (model.r2 - r1) * u.borrowing())
}

/// Next-period wealth from gross holdings:
/// `sum (1 + eta_i) u_i + (1 + r1) u_0 - (1 + r2) u_{n+1}`.
pub fn wealth_step_gross(
    model: &MarketModel,
    v: f64,
    u: &AllocationVector,
    eta: &DVector<f64>,
) -> Result<f64, ModelError> {
    check_step_inputs(model, v, u, eta)?;
    let risky: f64 = u.risky().iter().zip(eta.iter()).map(|(ui, e)| (1.0 + e) * ui).sum();
    let u0 = riskfree_allocation(v, u);
    Ok(risky + (1.0 + model.r1) * u0 - (1.0 + model.r2) * u.borrowing())
}

/// Amount held in the risk-free asset, `V - sum(u_i) + u_{n+1}`.
pub fn riskfree_allocation(v: f64, u: &AllocationVector) -> f64 {
    v - u.risky().sum() + u.borrowing()
}
