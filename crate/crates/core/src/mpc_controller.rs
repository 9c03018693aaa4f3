//! Receding-horizon QP for benchmark tracking under regime switching.
//!
//! For a horizon of `m` steps and `n` assets the decision variable stacks the
//! predicted controls `U = [u(k|k); ...; u(k+m-1|k)]`, `M = m (n+1)` entries.
//! The expected tracking criterion reduces to
//!
//! ```text
//!     Y(U) = (2 V(k) G - F) U + U' H U
//! ```
//!
//! whose blocks follow closed-form recursions in the regime distribution
//! `P^t theta(k)` (the `Q1`/`Q2` accumulators collapse the sums over the
//! horizon). Only the first block of the minimizer is applied.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{ModelError, MpcError};
use crate::market_model::{channel_row, AllocationVector, MarketModel};
use crate::markov_chain::{joint_occupancy, propagate, RegimeIndicator, TransitionMatrix};
use crate::qp_solver::{self, QpSolution};

pub type ControlCostSchedule = Arc<dyn Fn(usize, usize) -> DMatrix<f64> + Send + Sync>;
pub type WeightSchedule = Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>;

/// Deterministic target wealth path, `V0(k+1) = (1 + mu0) V0(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    series: Vec<f64>,
    growth: f64,
}

impl Benchmark {
    /// Precomputes `len` values of the geometric target.
    pub fn geometric(initial: f64, growth: f64, len: usize) -> Result<Self, ModelError> {
        if !(initial > 0.0) || !initial.is_finite() {
            return Err(ModelError::invalid("benchmark", format!("initial value {initial} must be positive")));
        }
        if !(growth > -1.0) || !growth.is_finite() {
            return Err(ModelError::invalid("benchmark", format!("growth {growth} must exceed -1")));
        }
        Ok(Self {
            series: crate::backtest::benchmark_series(initial, growth, len.max(1)),
            growth,
        })
    }

    /// Value at step `k`; past the precomputed range the recursion continues.
    pub fn value(&self, k: usize) -> f64 {
        match self.series.get(k) {
            Some(v) => *v,
            None => {
                let last = self.series.len() - 1;
                let mut v = self.series[last];
                for _ in last..k {
                    v *= 1.0 + self.growth;
                }
                v
            }
        }
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }
}

/// Horizon, weights and benchmark of the tracking criterion.
///
/// `control_cost(k, i)` is `R(k, i)` for horizon offsets `i` in `0..m`;
/// `rho(k, i)` is the linear weight for `i` in `1..=m`. Schedules installed
/// through the `with_*` builders are trusted; [`build_h`] still checks every
/// `R(k, i)` for positive definiteness.
#[derive(Clone)]
pub struct PredictionConfig {
    horizon: usize,
    control_cost: ControlCostSchedule,
    rho: WeightSchedule,
    benchmark: Benchmark,
}

impl std::fmt::Debug for PredictionConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PredictionConfig")
            .field("horizon", &self.horizon)
            .field("benchmark", &self.benchmark)
            .finish_non_exhaustive()
    }
}

impl PredictionConfig {
    /// Constant weights `R(k, i) = control_cost`, `rho(k, i) = rho`.
    pub fn new(horizon: usize, control_cost: DMatrix<f64>, rho: f64, benchmark: Benchmark) -> Result<Self, ModelError> {
        if horizon == 0 {
            return Err(ModelError::invalid("prediction horizon", "must be at least 1"));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(ModelError::invalid("rho", format!("{rho} must be positive")));
        }
        check_spd("control cost", &control_cost)?;
        Ok(Self {
            horizon,
            control_cost: Arc::new(move |_, _| control_cost.clone()),
            rho: Arc::new(move |_, _| rho),
            benchmark,
        })
    }

    /// Constant diagonal control cost `scale * I_(n+1)`.
    pub fn diagonal(horizon: usize, assets: usize, scale: f64, rho: f64, benchmark: Benchmark) -> Result<Self, ModelError> {
        Self::new(horizon, DMatrix::from_diagonal_element(assets + 1, assets + 1, scale), rho, benchmark)
    }

    pub fn with_control_cost_schedule(mut self, schedule: ControlCostSchedule) -> Self {
        self.control_cost = schedule;
        self
    }

    pub fn with_rho_schedule(mut self, schedule: WeightSchedule) -> Self {
        self.rho = schedule;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self, ModelError> {
        if horizon == 0 {
            return Err(ModelError::invalid("prediction horizon", "must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn control_cost(&self, k: usize, i: usize) -> DMatrix<f64> {
        (self.control_cost)(k, i)
    }

    pub fn rho(&self, k: usize, i: usize) -> f64 {
        (self.rho)(k, i)
    }

    pub fn benchmark(&self) -> &Benchmark {
        &self.benchmark
    }
}

fn check_spd(what: &'static str, m: &DMatrix<f64>) -> Result<(), ModelError> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(ModelError::NotPositiveDefinite { what });
    }
    match m.clone().cholesky() {
        Some(_) => Ok(()),
        None => Err(ModelError::NotPositiveDefinite { what }),
    }
}

/// Whether position limits bind only the applied control or every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintMode {
    /// Only `u(k|k)` is constrained; later blocks carry zero rows.
    #[default]
    FirstBlock,
    /// Every predicted block gets the same limits, scaled by the current wealth.
    FullHorizon,
}

/// Wealth-proportional position limits.
///
/// `gamma` holds `n + 2` fractions: one per asset, then the risk-free cap
/// `gamma_0`, then the borrowing cap `gamma_{n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    beta: DVector<f64>,
    gamma: DVector<f64>,
    mode: ConstraintMode,
}

impl ConstraintSpec {
    pub fn new(beta: DVector<f64>, gamma: DVector<f64>, mode: ConstraintMode) -> Result<Self, ModelError> {
        let n = beta.len();
        if n == 0 {
            return Err(ModelError::invalid("constraints", "no assets"));
        }
        ModelError::check_dim("gamma", n + 2, gamma.len())?;
        if beta.iter().chain(gamma.iter()).any(|x| !x.is_finite()) {
            return Err(ModelError::invalid("constraints", "non-finite fraction"));
        }
        for i in 0..n {
            if beta[i] > gamma[i] {
                return Err(ModelError::invalid(
                    "constraints",
                    format!("asset {}: beta {} exceeds gamma {}", i + 1, beta[i], gamma[i]),
                ));
            }
        }
        if gamma[n] < 0.0 || gamma[n + 1] < 0.0 {
            return Err(ModelError::invalid("constraints", "risk-free and borrowing caps must be non-negative"));
        }
        Ok(Self { beta, gamma, mode })
    }

    /// Same `beta` for every asset and the same `gamma` for every cap.
    pub fn uniform(n: usize, beta: f64, gamma: f64, mode: ConstraintMode) -> Result<Self, ModelError> {
        Self::new(DVector::from_element(n, beta), DVector::from_element(n + 2, gamma), mode)
    }

    pub fn assets(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: ConstraintMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn riskfree_cap(&self) -> f64 {
        self.gamma[self.assets()]
    }

    pub fn borrowing_cap(&self) -> f64 {
        self.gamma[self.assets() + 1]
    }
}

/// Stacked constraint rows `lower <= operator U <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub operator: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// The `(n+2) x (n+1)` single-block operator: asset rows, the risk-free
/// budget row `[-1 .. -1, 1]`, and the borrowing row.
pub fn single_block_operator(n: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n + 2, n + 1);
    for i in 0..n {
        s[(i, i)] = 1.0;
        s[(n, i)] = -1.0;
    }
    s[(n, n)] = 1.0;
    s[(n + 1, n)] = 1.0;
    s
}

pub fn build_constraints(spec: &ConstraintSpec, wealth: f64, n: usize, m: usize) -> Result<ConstraintSystem, ModelError> {
    if !(wealth > 0.0) || !wealth.is_finite() {
        return Err(ModelError::invalid("wealth", format!("{wealth} must be positive")));
    }
    ModelError::check_dim("constraint assets", n, spec.assets())?;
    if m == 0 {
        return Err(ModelError::invalid("prediction horizon", "must be at least 1"));
    }
    let block_rows = n + 2;
    let block_cols = n + 1;
    let s = single_block_operator(n);
    let mut lo = DVector::zeros(block_rows);
    let mut hi = DVector::zeros(block_rows);
    for i in 0..n {
        lo[i] = spec.beta[i] * wealth;
        hi[i] = spec.gamma[i] * wealth;
    }
    lo[n] = -wealth;
    hi[n] = spec.riskfree_cap() * wealth - wealth;
    lo[n + 1] = 0.0;
    hi[n + 1] = spec.borrowing_cap() * wealth;

    let mut operator = DMatrix::zeros(m * block_rows, m * block_cols);
    let mut lower = DVector::zeros(m * block_rows);
    let mut upper = DVector::zeros(m * block_rows);
    let blocks = match spec.mode {
        ConstraintMode::FirstBlock => 1,
        ConstraintMode::FullHorizon => m,
    };
    for b in 0..blocks {
        operator
            .view_mut((b * block_rows, b * block_cols), (block_rows, block_cols))
            .copy_from(&s);
        lower.rows_mut(b * block_rows, block_rows).copy_from(&lo);
        upper.rows_mut(b * block_rows, block_rows).copy_from(&hi);
    }
    Ok(ConstraintSystem { operator, lower, upper })
}

/// Inputs shared by every block builder at one decision time.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub chain: &'a TransitionMatrix,
    pub theta: &'a RegimeIndicator,
    pub model: &'a MarketModel,
    pub config: &'a PredictionConfig,
    /// Decision index, measured on the benchmark's clock.
    pub k: usize,
}

impl StepInputs<'_> {
    fn check(&self) -> Result<(), ModelError> {
        ModelError::check_dim("regime indicator", self.chain.regimes(), self.theta.regimes())?;
        ModelError::check_dim("market regimes", self.chain.regimes(), self.model.regime_count())?;
        Ok(())
    }

    fn dims(&self) -> (usize, usize) {
        (self.config.horizon(), self.model.assets() + 1)
    }
}

/// `R1(k, t) = 2 V0(k+t) + rho(k, t)` for `t` in `1..=m`.
pub fn r1_coefficient(cfg: &PredictionConfig, k: usize, t: usize) -> Result<f64, ModelError> {
    if t == 0 || t > cfg.horizon() {
        return Err(ModelError::IndexOutOfRange {
            what: "horizon offset",
            index: t,
            limit: cfg.horizon(),
        });
    }
    Ok(2.0 * cfg.benchmark().value(k + t) + cfg.rho(k, t))
}

/// Scalar accumulators of the block recursions at one decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecursionState {
    /// `Q1(t)` for `t` in `0..=m`.
    pub q1: Vec<f64>,
    /// `Q2(t)` for `t` in `0..m`.
    pub q2: Vec<f64>,
    /// `R1(k, t)` stored at index `t - 1`.
    pub r1_coeffs: Vec<f64>,
    /// Cash growth factor `1 + r1`.
    pub a: f64,
}

impl BlockRecursionState {
    pub fn q1(&self, t: usize) -> f64 {
        self.q1[t]
    }

    pub fn q2(&self, t: usize) -> f64 {
        self.q2[t]
    }

    pub fn r1(&self, t: usize) -> f64 {
        self.r1_coeffs[t - 1]
    }
}

/// `Q1(t) = A^2 Q1(t-1) + 1` with `Q1(0) = 1`, and
/// `Q2(t) = A Q2(t-1) + R1(k, m-t)` with `Q2(0) = R1(k, m)`.
pub fn q_recursions(cfg: &PredictionConfig, model: &MarketModel, k: usize) -> Result<BlockRecursionState, ModelError> {
    let m = cfg.horizon();
    let a = model.growth_factor();
    let r1_coeffs = (1..=m).map(|t| r1_coefficient(cfg, k, t)).collect::<Result<Vec<_>, _>>()?;
    let mut q1 = vec![1.0; m + 1];
    for t in 1..=m {
        q1[t] = a * a * q1[t - 1] + 1.0;
    }
    let mut q2 = vec![r1_coeffs[m - 1]; m];
    for t in 1..m {
        q2[t] = a * q2[t - 1] + r1_coeffs[m - t - 1];
    }
    Ok(BlockRecursionState { q1, q2, r1_coeffs, a })
}

/// `rows[q][j]` is `B_j` of regime `q` for channel `j` in `0..=n`.
fn channel_rows(model: &MarketModel) -> Result<Vec<Vec<RowDVector<f64>>>, ModelError> {
    let n = model.assets();
    (0..model.regime_count())
        .map(|q| (0..=n).map(|j| channel_row(model, q, j)).collect())
        .collect()
}

fn marginals(inp: &StepInputs<'_>) -> Result<Vec<DVector<f64>>, ModelError> {
    (0..=inp.config.horizon()).map(|t| propagate(inp.chain, inp.theta, t)).collect()
}

/// Quadratic term `H(k)`: diagonal blocks carry the full second moment of
/// every channel, off-diagonal blocks only the excess-return cross moment
/// weighted by the joint regime occupancy.
pub fn build_h(inp: &StepInputs<'_>) -> Result<DMatrix<f64>, ModelError> {
    inp.check()?;
    let (m, width) = inp.dims();
    let rec = q_recursions(inp.config, inp.model, inp.k)?;
    let rows = channel_rows(inp.model)?;
    let dist = marginals(inp)?;
    let v = inp.chain.regimes();
    let a = rec.a;

    let mut h = DMatrix::zeros(m * width, m * width);
    for t in 1..=m {
        let r = inp.config.control_cost(inp.k, t - 1);
        ModelError::check_dim("control cost", width, r.nrows())?;
        check_spd("control cost", &r)?;
        let mut block = r;
        let weight = rec.q1(m - t);
        for q in 0..v {
            let p = dist[t][q];
            if p == 0.0 {
                continue;
            }
            for b in &rows[q] {
                block += (weight * p) * b.transpose() * b;
            }
        }
        h.view_mut(((t - 1) * width, (t - 1) * width), (width, width)).copy_from(&block);

        for f in t + 1..=m {
            let joint = joint_occupancy(inp.chain, inp.theta, t, f)?;
            let scale = a.powi((f - t) as i32) * rec.q1(m - f);
            let mut cross = DMatrix::zeros(width, width);
            for q in 0..v {
                for r in 0..v {
                    let p = joint[(q, r)];
                    if p != 0.0 {
                        cross += (scale * p) * rows[q][0].transpose() * &rows[r][0];
                    }
                }
            }
            h.view_mut(((t - 1) * width, (f - 1) * width), (width, width)).copy_from(&cross);
            h.view_mut(((f - 1) * width, (t - 1) * width), (width, width))
                .copy_from(&cross.transpose());
        }
    }
    Ok(h)
}

fn expected_b0(rows: &[Vec<RowDVector<f64>>], dist: &DVector<f64>) -> RowDVector<f64> {
    let mut acc = RowDVector::zeros(rows[0][0].len());
    for (q, r) in rows.iter().enumerate() {
        acc += &r[0] * dist[q];
    }
    acc
}

/// Wealth-coupling row `G(k)`, block `t` = `A^t Q1(m-t) E[B_0(k+t)]`.
pub fn build_g(inp: &StepInputs<'_>) -> Result<RowDVector<f64>, ModelError> {
    inp.check()?;
    let (m, width) = inp.dims();
    let rec = q_recursions(inp.config, inp.model, inp.k)?;
    let rows = channel_rows(inp.model)?;
    let dist = marginals(inp)?;
    let mut g = RowDVector::zeros(m * width);
    for t in 1..=m {
        let block = expected_b0(&rows, &dist[t]) * (rec.a.powi(t as i32) * rec.q1(m - t));
        g.columns_mut((t - 1) * width, width).copy_from(&block);
    }
    Ok(g)
}

/// Benchmark-pull row `F(k)`, block `t` = `Q2(m-t) E[B_0(k+t)]`.
pub fn build_f(inp: &StepInputs<'_>) -> Result<RowDVector<f64>, ModelError> {
    inp.check()?;
    let (m, width) = inp.dims();
    let rec = q_recursions(inp.config, inp.model, inp.k)?;
    let rows = channel_rows(inp.model)?;
    let dist = marginals(inp)?;
    let mut f = RowDVector::zeros(m * width);
    for t in 1..=m {
        let block = expected_b0(&rows, &dist[t]) * rec.q2(m - t);
        f.columns_mut((t - 1) * width, width).copy_from(&block);
    }
    Ok(f)
}

/// `min U' H U + linear' U` subject to `lower <= constraint_operator U <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub h: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraint_operator: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn dimension(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        qp_solver::objective(&self.h, &self.linear, u)
    }

    /// Largest bound violation of `u` (zero when feasible).
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        let au = &self.constraint_operator * u;
        (0..au.len())
            .map(|i| (self.lower[i] - au[i]).max(au[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn solve(&self, tol: f64) -> Result<QpSolution, crate::error::QpError> {
        qp_solver::solve(&self.h, &self.linear, &self.constraint_operator, &self.lower, &self.upper, tol)
    }
}

pub fn assemble_qp(inp: &StepInputs<'_>, spec: &ConstraintSpec, wealth: f64) -> Result<QuadraticProgram, ModelError> {
    let (m, width) = inp.dims();
    let constraints = build_constraints(spec, wealth, width - 1, m)?;
    let h = build_h(inp)?;
    let g = build_g(inp)?;
    let f = build_f(inp)?;
    let linear = (g * (2.0 * wealth) - f).transpose();
    Ok(QuadraticProgram {
        h,
        linear,
        constraint_operator: constraints.operator,
        lower: constraints.lower,
        upper: constraints.upper,
    })
}

/// First control block `u(k|k)` of the stacked minimizer.
pub fn extract_control(u: &DVector<f64>, n: usize) -> Result<AllocationVector, ModelError> {
    let width = n + 1;
    if u.is_empty() || u.len() % width != 0 {
        return Err(ModelError::DimensionMismatch {
            what: "stacked control",
            expected: width * (u.len() / width).max(1),
            found: u.len(),
        });
    }
    AllocationVector::new(u.rows(0, width).into_owned())
}

/// The applied control together with the full QP solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcDecision {
    pub allocation: AllocationVector,
    pub solution: QpSolution,
}

pub fn solve_step(inp: &StepInputs<'_>, spec: &ConstraintSpec, wealth: f64) -> Result<MpcDecision, MpcError> {
    let qp = assemble_qp(inp, spec, wealth)?;
    let solution = qp.solve(qp_solver::DEFAULT_TOLERANCE)?;
    let allocation = extract_control(&solution.minimizer, inp.model.assets())?;
    Ok(MpcDecision { allocation, solution })
}

/// One receding-horizon decision: assemble, solve, apply the first block.
pub fn mpc_step(inp: &StepInputs<'_>, spec: &ConstraintSpec, wealth: f64) -> Result<AllocationVector, MpcError> {
    solve_step(inp, spec, wealth).map(|d| d.allocation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::RegimeParameters;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_asset(mu: f64, sigma: f64) -> MarketModel {
        MarketModel::new(
            vec![RegimeParameters::diagonal(DVector::from_element(1, mu), sigma).unwrap()],
            0.0,
            0.0,
        )
        .unwrap()
    }

    fn paper_config(m: usize, n: usize) -> PredictionConfig {
        PredictionConfig::diagonal(m, n, 1e-4, 0.1, Benchmark::geometric(1.0, 0.0015, 64).unwrap()).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, v: usize, n: usize) -> MarketModel {
        let regimes = (0..v)
            .map(|_| {
                RegimeParameters::new(
                    DVector::from_fn(n, |_, _| rng.random_range(-0.002..0.003)),
                    DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.02..0.02)),
                )
                .unwrap()
            })
            .collect();
        MarketModel::new(regimes, 0.0001, 0.0003).unwrap()
    }

    fn random_chain(rng: &mut ChaCha8Rng, v: usize) -> TransitionMatrix {
        let mut m = DMatrix::from_fn(v, v, |_, _| rng.random_range(0.05..1.0));
        for mut col in m.column_iter_mut() {
            let s: f64 = col.iter().sum();
            col.unscale_mut(s);
            let rest: f64 = col.iter().skip(1).sum();
            col[0] = 1.0 - rest;
        }
        TransitionMatrix::new(m).unwrap()
    }

    #[test]
    fn r1_coefficient_examples() {
        let cfg = paper_config(3, 1);
        assert_abs_diff_eq!(r1_coefficient(&cfg, 0, 1).unwrap(), 2.103, epsilon = 1e-12);

        let flat = PredictionConfig::diagonal(2, 1, 1e-4, 0.2, Benchmark::geometric(1.0, 0.0, 4).unwrap()).unwrap();
        assert_abs_diff_eq!(r1_coefficient(&flat, 0, 2).unwrap(), 2.2, epsilon = 1e-12);

        let zero_rho = PredictionConfig::diagonal(1, 1, 1e-4, 0.1, Benchmark::geometric(0.5, 0.0, 4).unwrap())
            .unwrap()
            .with_rho_schedule(Arc::new(|_, _| 0.0));
        assert_abs_diff_eq!(r1_coefficient(&zero_rho, 0, 1).unwrap(), 1.0, epsilon = 1e-15);

        assert!(r1_coefficient(&cfg, 0, 0).is_err());
        assert!(r1_coefficient(&cfg, 0, 4).is_err());
    }

    #[test]
    fn q_recursion_examples() {
        let flat = PredictionConfig::diagonal(5, 1, 1e-4, 0.1, Benchmark::geometric(1.0, 0.0, 8).unwrap()).unwrap();
        let rec = q_recursions(&flat, &one_asset(0.0, 0.01), 0).unwrap();
        for t in 0..=5 {
            assert_abs_diff_eq!(rec.q1(t), (t + 1) as f64, epsilon = 1e-12);
        }
        // R1 = 2 * 1 + 0.1 everywhere
        for t in 0..5 {
            assert_abs_diff_eq!(rec.q2(t), 2.1 * (t + 1) as f64, epsilon = 1e-12);
        }

        let growing = MarketModel::new(
            vec![RegimeParameters::diagonal(DVector::zeros(1), 0.01).unwrap()],
            0.01,
            0.01,
        )
        .unwrap();
        let rec = q_recursions(&paper_config(3, 1), &growing, 0).unwrap();
        assert_abs_diff_eq!(rec.q1(2), 3.06070401, epsilon = 1e-12);
    }

    #[test]
    fn q_recursions_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = rng.random_range(1..12);
            let r1 = rng.random_range(0.0..0.01);
            let model = MarketModel::new(
                vec![RegimeParameters::diagonal(DVector::zeros(1), 0.01).unwrap()],
                r1,
                r1,
            )
            .unwrap();
            let cfg = PredictionConfig::diagonal(m, 1, 1e-4, rng.random_range(0.01..1.0), Benchmark::geometric(1.3, 0.002, 40).unwrap())
                .unwrap();
            let k = rng.random_range(0..20);
            let rec = q_recursions(&cfg, &model, k).unwrap();
            let a = 1.0 + r1;
            for t in 0..=m {
                let direct: f64 = (0..=t).map(|j| a.powi(2 * j as i32)).sum();
                assert_abs_diff_eq!(rec.q1(t), direct, epsilon = 1e-10);
            }
            for t in 1..=m {
                let direct: f64 = (t..=m)
                    .map(|i| a.powi((i - t) as i32) * r1_coefficient(&cfg, k, i).unwrap())
                    .sum();
                assert_abs_diff_eq!(rec.q2(m - t), direct, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn single_block_worked_example() {
        let model = one_asset(0.001, 0.01);
        let chain = TransitionMatrix::identity(1);
        let theta = RegimeIndicator::observed(1, 0).unwrap();
        let cfg = paper_config(1, 1);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };

        let h = build_h(&inp).unwrap();
        assert_abs_diff_eq!(h, DMatrix::from_row_slice(2, 2, &[2.01e-4, 0.0, 0.0, 1e-4]), epsilon = 1e-18);
        let g = build_g(&inp).unwrap();
        assert_abs_diff_eq!(g, RowDVector::from_vec(vec![0.001, 0.0]), epsilon = 1e-18);
        let f = build_f(&inp).unwrap();
        assert_abs_diff_eq!(f, RowDVector::from_vec(vec![0.002103, 0.0]), epsilon = 1e-15);

        let spec = ConstraintSpec::uniform(1, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
        let qp = assemble_qp(&inp, &spec, 1.0).unwrap();
        assert_abs_diff_eq!(qp.linear, DVector::from_vec(vec![-0.000103, 0.0]), epsilon = 1e-15);

        let u = mpc_step(&inp, &spec, 1.0).unwrap();
        let expected = 0.000103 / (2.0 * 2.01e-4);
        assert_abs_diff_eq!(u.as_vector()[0], expected, epsilon = 1e-10);
        assert_abs_diff_eq!(u.as_vector()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn vanishing_excess_returns_give_block_diagonal_h_and_cash() {
        let flat = MarketModel::new(
            vec![
                RegimeParameters::diagonal(DVector::from_element(2, 0.0002), 0.0).unwrap(),
                RegimeParameters::diagonal(DVector::from_element(2, 0.0002), 0.0).unwrap(),
            ],
            0.0002,
            0.0002,
        )
        .unwrap();
        let chain = TransitionMatrix::from_row_slice(2, &[0.96, 0.24, 0.04, 0.76]).unwrap();
        let theta = RegimeIndicator::observed(2, 1).unwrap();
        let cfg = PredictionConfig::diagonal(3, 2, 1e-4, 0.1, Benchmark::geometric(1.0, 0.0015, 8).unwrap())
            .unwrap()
            .with_control_cost_schedule(Arc::new(|_, i| DMatrix::identity(3, 3) * (1e-4 * (i + 1) as f64)));
        let inp = StepInputs { chain: &chain, theta: &theta, model: &flat, config: &cfg, k: 0 };
        let h = build_h(&inp).unwrap();
        let mut expected = DMatrix::zeros(9, 9);
        for i in 0..3 {
            expected
                .view_mut((3 * i, 3 * i), (3, 3))
                .copy_from(&(DMatrix::identity(3, 3) * (1e-4 * (i + 1) as f64)));
        }
        assert_abs_diff_eq!(h, expected, epsilon = 1e-20);
        assert_eq!(build_g(&inp).unwrap(), RowDVector::zeros(9));
        assert_eq!(build_f(&inp).unwrap(), RowDVector::zeros(9));

        let spec = ConstraintSpec::uniform(2, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
        let qp = assemble_qp(&inp, &spec, 1.0).unwrap();
        assert_eq!(qp.linear, DVector::zeros(9));
        let u = mpc_step(&inp, &spec, 1.0).unwrap();
        assert!(u.as_vector().amax() < 1e-12);
    }

    #[test]
    fn horizon_one_reduces_to_single_step_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 3, 2);
        let chain = random_chain(&mut rng, 3);
        let theta = RegimeIndicator::observed(3, 2).unwrap();
        let cfg = paper_config(1, 2);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 4 };
        let next = chain.matrix() * theta.as_vector();
        let mut h = cfg.control_cost(4, 0);
        let mut b0 = RowDVector::zeros(3);
        for q in 0..3 {
            for j in 0..=2 {
                let b = channel_row(&model, q, j).unwrap();
                h += next[q] * b.transpose() * &b;
            }
            b0 += next[q] * channel_row(&model, q, 0).unwrap();
        }
        assert_abs_diff_eq!(build_h(&inp).unwrap(), h, epsilon = 1e-15);
        assert_abs_diff_eq!(build_g(&inp).unwrap(), &b0 * model.growth_factor(), epsilon = 1e-15);
        let r1 = r1_coefficient(&cfg, 4, 1).unwrap();
        assert_abs_diff_eq!(build_f(&inp).unwrap(), &b0 * r1, epsilon = 1e-15);
    }

    #[test]
    fn h_is_symmetric_positive_definite_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..60 {
            let v = rng.random_range(1..=4);
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=10);
            let model = random_model(&mut rng, v, n);
            let chain = random_chain(&mut rng, v);
            let theta = RegimeIndicator::observed(v, rng.random_range(0..v)).unwrap();
            let cfg = paper_config(m, n);
            let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
            let h = build_h(&inp).unwrap();
            assert!((&h - h.transpose()).amax() < 1e-10);
            assert!(h.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn non_positive_definite_control_cost_is_rejected() {
        let model = one_asset(0.001, 0.01);
        let chain = TransitionMatrix::identity(1);
        let theta = RegimeIndicator::observed(1, 0).unwrap();
        let cfg = paper_config(2, 1).with_control_cost_schedule(Arc::new(|_, _| DMatrix::zeros(2, 2)));
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        assert!(matches!(build_h(&inp), Err(ModelError::NotPositiveDefinite { .. })));
        assert!(PredictionConfig::new(1, DMatrix::zeros(2, 2), 0.1, Benchmark::geometric(1.0, 0.0, 2).unwrap()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = one_asset(0.001, 0.01);
        let chain = TransitionMatrix::identity(2);
        let theta = RegimeIndicator::observed(2, 0).unwrap();
        let cfg = paper_config(2, 1);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        assert!(matches!(build_h(&inp), Err(ModelError::DimensionMismatch { .. })));
        assert!(build_g(&inp).is_err());
        assert!(build_f(&inp).is_err());
    }

    #[test]
    fn constraint_examples() {
        let spec = ConstraintSpec::uniform(2, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
        let sys = build_constraints(&spec, 1.0, 2, 1).unwrap();
        assert_eq!(sys.lower.as_slice(), &[-0.6, -0.6, -1.0, 0.0]);
        assert_eq!(sys.upper.as_slice(), &[3.0, 3.0, 2.0, 3.0]);
        assert_eq!(
            sys.operator,
            DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, -1.0, 1.0, 0.0, 0.0, 1.0])
        );

        let doubled = build_constraints(&spec, 2.0, 2, 1).unwrap();
        assert_eq!(doubled.lower, &sys.lower * 2.0);
        assert_eq!(doubled.upper, &sys.upper * 2.0);

        let long_only = ConstraintSpec::new(
            DVector::zeros(2),
            DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0]),
            ConstraintMode::FirstBlock,
        )
        .unwrap();
        let sys = build_constraints(&long_only, 1.0, 2, 1).unwrap();
        assert_eq!(sys.lower[0], 0.0);
        assert_eq!(sys.lower[1], 0.0);
        assert_eq!(sys.lower[3], 0.0);
        assert_eq!(sys.upper[3], 0.0);

        assert!(build_constraints(&spec, 0.0, 2, 1).is_err());
        assert!(ConstraintSpec::uniform(2, 1.0, 0.5, ConstraintMode::FirstBlock).is_err());
    }

    #[test]
    fn later_blocks_are_unconstrained_in_first_block_mode() {
        let spec = ConstraintSpec::uniform(1, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
        let sys = build_constraints(&spec, 1.0, 1, 3).unwrap();
        assert_eq!(sys.operator.shape(), (9, 6));
        assert_eq!(sys.operator.view((3, 0), (6, 6)), DMatrix::<f64>::zeros(6, 6));
        assert!(sys.lower.rows(3, 6).iter().chain(sys.upper.rows(3, 6).iter()).all(|x| *x == 0.0));

        let full = build_constraints(&spec.with_mode(ConstraintMode::FullHorizon), 1.0, 1, 3).unwrap();
        for b in 0..3 {
            assert_eq!(full.operator.view((3 * b, 2 * b), (3, 2)), single_block_operator(1));
            assert_eq!(full.upper.rows(3 * b, 3).as_slice(), &[3.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn zero_allocation_is_always_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..5);
            let m = rng.random_range(1..5);
            let spec = ConstraintSpec::new(
                DVector::from_fn(n, |_, _| rng.random_range(-1.0..=0.0)),
                DVector::from_fn(n + 2, |_, _| rng.random_range(1.0..4.0)),
                ConstraintMode::FullHorizon,
            )
            .unwrap();
            let sys = build_constraints(&spec, rng.random_range(0.1..5.0), n, m).unwrap();
            let au = &sys.operator * DVector::zeros(m * (n + 1));
            for i in 0..au.len() {
                assert!(sys.lower[i] <= au[i] && au[i] <= sys.upper[i]);
            }
        }
    }

    #[test]
    fn applied_control_respects_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..40 {
            let v = rng.random_range(1..=3);
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=6);
            let model = random_model(&mut rng, v, n);
            let chain = random_chain(&mut rng, v);
            let theta = RegimeIndicator::observed(v, 0).unwrap();
            let cfg = paper_config(m, n);
            let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
            let wealth = rng.random_range(0.5..2.0);
            let spec = ConstraintSpec::uniform(n, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
            let d = solve_step(&inp, &spec, wealth).unwrap();
            let sys = build_constraints(&spec, wealth, n, 1).unwrap();
            let au = &sys.operator * d.allocation.as_vector();
            for i in 0..au.len() {
                assert!(au[i] >= sys.lower[i] - 1e-8 && au[i] <= sys.upper[i] + 1e-8);
            }
            assert!(d.solution.kkt_residual < 1e-9);
        }
    }

    #[test]
    fn extract_control_examples() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(extract_control(&u, 1).unwrap().as_vector().as_slice(), &[1.0, 2.0]);
        let two = DVector::from_vec(vec![0.5, -0.5]);
        assert_eq!(extract_control(&two, 1).unwrap().as_vector(), &two);
        assert_eq!(extract_control(&DVector::zeros(4), 1).unwrap(), AllocationVector::cash(1));
        assert!(extract_control(&DVector::zeros(5), 1).is_err());
    }

    #[test]
    fn benchmark_extends_past_precomputed_range() {
        let b = Benchmark::geometric(1.0, 0.01, 3).unwrap();
        assert_abs_diff_eq!(b.value(5), 1.01f64.powi(5), epsilon = 1e-14);
        assert!(Benchmark::geometric(0.0, 0.01, 3).is_err());
    }
}
