//! Brute-force checks for the controller.
//!
//! [`mc_blocks`] samples regime paths and noise, assembles the stacked
//! prediction matrices `Phi_j` explicitly and averages the quadratic,
//! wealth-coupling and benchmark-pull terms of the horizon criterion. It
//! shares no code with the closed-form recursions in
//! [`crate::mpc_controller`], which it is meant to validate.
//! [`grid_argmin`] is an exhaustive (or sampled) search used to certify QP
//! minimizers. [`sample_criteria`] simulates wealth paths directly from the
//! return model.
//!
//! Nothing here is used by the backtest loop.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::ModelError;
use crate::market_model::{wealth_step, AllocationVector, MarketModel};
use crate::mpc_controller::{QuadraticProgram, StepInputs};
use crate::markov_chain::TransitionMatrix;

/// Number of independent random streams an estimate is split into.
const STREAMS: u64 = 8;

/// One joint draw of the stacked prediction over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPrediction {
    /// `[A, A^2, ..., A^m]`.
    pub psi: DVector<f64>,
    /// `phi[j]` is the `m x M` lower block-triangular matrix of channel `j`
    /// (channel 0 is the excess-return channel).
    pub phi: Vec<DMatrix<f64>>,
    /// Sampled regimes at `k+1 ..= k+m`.
    pub regimes: Vec<usize>,
    /// `w[j-1][t-1]` is the standard noise of channel `j` at `k+t`.
    pub w: Vec<DVector<f64>>,
    /// `blockdiag(R(k,0), ..., R(k,m-1))`.
    pub delta: DMatrix<f64>,
    /// `[R1(k,1), ..., R1(k,m)]`.
    pub delta1: RowDVector<f64>,
}

impl StackedPrediction {
    /// Indicator vectors `theta(k+t)` stacked as `Xi`.
    pub fn xi(&self, v: usize) -> DVector<f64> {
        let mut xi = DVector::zeros(self.regimes.len() * v);
        for (t, &q) in self.regimes.iter().enumerate() {
            xi[t * v + q] = 1.0;
        }
        xi
    }

    /// `Phi_j diag(W_j)`, the noise scaling applied per control block.
    pub fn scaled_phi(&self, j: usize) -> DMatrix<f64> {
        let mut out = self.phi[j].clone();
        if j == 0 {
            return out;
        }
        let width = out.ncols() / out.nrows();
        for (t, w) in self.w[j - 1].iter().enumerate() {
            out.columns_mut(t * width, width).scale_mut(*w);
        }
        out
    }

    /// `Phi_0' Phi_0 + sum_j (Phi_j D_j)' (Phi_j D_j)`, without `Delta`.
    pub fn quadratic_sample(&self) -> DMatrix<f64> {
        let mut s = self.phi[0].tr_mul(&self.phi[0]);
        for j in 1..self.phi.len() {
            let scaled = self.scaled_phi(j);
            s.gemm_tr(1.0, &scaled, &scaled, 1.0);
        }
        s
    }
}

/// Row of channel `j` under regime `q`, read straight off the parameters.
fn oracle_row(model: &MarketModel, q: usize, j: usize) -> RowDVector<f64> {
    let params = &model.regimes()[q];
    let n = params.assets();
    let mut row = RowDVector::zeros(n + 1);
    if j == 0 {
        for i in 0..n {
            row[i] = params.mu()[i] - model.lending_rate();
        }
        row[n] = model.lending_rate() - model.borrowing_rate();
    } else {
        for i in 0..n {
            row[i] = params.sigma()[(i, j - 1)];
        }
    }
    row
}

struct Sampler<'a> {
    chain: &'a TransitionMatrix,
    theta: DVector<f64>,
    rows: Vec<Vec<RowDVector<f64>>>,
    powers: Vec<f64>,
    m: usize,
    n: usize,
}

impl<'a> Sampler<'a> {
    fn new(inp: &StepInputs<'a>) -> Result<Self, ModelError> {
        ModelError::check_dim("regime indicator", inp.chain.regimes(), inp.theta.regimes())?;
        ModelError::check_dim("market regimes", inp.chain.regimes(), inp.model.regime_count())?;
        let n = inp.model.assets();
        let m = inp.config.horizon();
        let rows = (0..inp.model.regime_count())
            .map(|q| (0..=n).map(|j| oracle_row(inp.model, q, j)).collect())
            .collect();
        let a = inp.model.growth_factor();
        let powers = (0..=m).map(|p| a.powi(p as i32)).collect();
        Ok(Self {
            chain: inp.chain,
            theta: inp.theta.as_vector().clone(),
            rows,
            powers,
            m,
            n,
        })
    }

    fn initial_state<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (q, p) in self.theta.iter().enumerate() {
            acc += p;
            if u < acc {
                return q;
            }
        }
        self.theta.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }

    /// Fills `phi`, `regimes` and `w` in place.
    fn draw<R: Rng>(&self, rng: &mut R, phi: &mut [DMatrix<f64>], regimes: &mut [usize], w: &mut [DVector<f64>]) {
        let mut state = self.initial_state(rng);
        for slot in regimes.iter_mut() {
            state = self.chain.successor(state, rng.random());
            *slot = state;
        }
        for wj in w.iter_mut() {
            for x in wj.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
        let width = self.n + 1;
        for (j, p) in phi.iter_mut().enumerate() {
            p.fill(0.0);
            for t in 0..self.m {
                let row = &self.rows[regimes[t]][j];
                for i in t..self.m {
                    let scale = self.powers[i - t];
                    for c in 0..width {
                        p[(i, t * width + c)] = scale * row[c];
                    }
                }
            }
        }
    }
}

fn deterministic_parts(inp: &StepInputs<'_>) -> Result<(DVector<f64>, DMatrix<f64>, RowDVector<f64>), ModelError> {
    let m = inp.config.horizon();
    let width = inp.model.assets() + 1;
    let a = inp.model.growth_factor();
    let psi = DVector::from_fn(m, |i, _| a.powi(i as i32 + 1));
    let mut delta = DMatrix::zeros(m * width, m * width);
    for i in 0..m {
        let r = inp.config.control_cost(inp.k, i);
        ModelError::check_dim("control cost", width, r.nrows())?;
        delta.view_mut((i * width, i * width), (width, width)).copy_from(&r);
    }
    let delta1 = RowDVector::from_fn(m, |_, t| {
        2.0 * inp.config.benchmark().value(inp.k + t + 1) + inp.config.rho(inp.k, t + 1)
    });
    Ok((psi, delta, delta1))
}

/// Draws one regime path and noise sequence and assembles every `Phi_j`.
pub fn sample_stacked<R: Rng>(inp: &StepInputs<'_>, rng: &mut R) -> Result<StackedPrediction, ModelError> {
    let sampler = Sampler::new(inp)?;
    let (psi, delta, delta1) = deterministic_parts(inp)?;
    let (m, n) = (sampler.m, sampler.n);
    let mut phi = vec![DMatrix::zeros(m, m * (n + 1)); n + 1];
    let mut regimes = vec![0; m];
    let mut w = vec![DVector::zeros(m); n];
    sampler.draw(rng, &mut phi, &mut regimes, &mut w);
    Ok(StackedPrediction {
        psi,
        phi,
        regimes,
        w,
        delta,
        delta1,
    })
}

/// Running mean and centred second moment, shifted by the first
/// observation to avoid cancellation.
#[derive(Debug, Clone)]
struct EntryStats {
    count: f64,
    shift: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl EntryStats {
    fn new(len: usize) -> Self {
        Self {
            count: 0.0,
            shift: vec![0.0; len],
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    fn push(&mut self, values: &[f64]) {
        if self.count == 0.0 {
            self.shift.copy_from_slice(values);
        }
        self.count += 1.0;
        for (i, x) in values.iter().enumerate() {
            let d = x - self.shift[i];
            self.sum[i] += d;
            self.sum_sq[i] += d * d;
        }
    }

    /// `(count, mean, M2)` per entry.
    fn moments(&self) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.count;
        let mean = self.sum.iter().zip(&self.shift).map(|(s, k)| k + s / n).collect();
        let m2 = self
            .sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| (q - s * s / n).max(0.0))
            .collect();
        (n, mean, m2)
    }
}

/// Chan's pairwise merge of per-stream moments, in stream order.
fn merge(parts: Vec<EntryStats>) -> (Vec<f64>, Vec<f64>) {
    let mut total = 0.0;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for part in parts {
        if part.count == 0.0 {
            continue;
        }
        let (nb, mb, m2b) = part.moments();
        if total == 0.0 {
            total = nb;
            mean = mb;
            m2 = m2b;
            continue;
        }
        let n = total + nb;
        for i in 0..mean.len() {
            let delta = mb[i] - mean[i];
            mean[i] += delta * nb / n;
            m2[i] += m2b[i] + delta * delta * total * nb / n;
        }
        total = n;
    }
    let se = m2.iter().map(|v| (v / (total - 1.0) / total).sqrt()).collect();
    (mean, se)
}

/// Monte-Carlo estimates of the criterion blocks with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McBlocks {
    /// `E[Phi_0'Phi_0 + sum_j D_j Phi_j' Phi_j D_j] + Delta`.
    pub h: DMatrix<f64>,
    pub h_se: DMatrix<f64>,
    /// `Psi' E[Phi_0]`.
    pub g: RowDVector<f64>,
    pub g_se: RowDVector<f64>,
    /// `Delta_1 E[Phi_0]`.
    pub f: RowDVector<f64>,
    pub f_se: RowDVector<f64>,
    /// Empirical regime distribution at `k+t`, `t = 1..=m` (stored at `t-1`).
    pub occupancy: Vec<DVector<f64>>,
    pub occupancy_se: Vec<DVector<f64>>,
    pub samples: usize,
}

/// Averages the stacked-prediction terms over `samples` paths drawn from
/// `STREAMS` independent ChaCha streams derived from `seed`.
pub fn mc_blocks(inp: &StepInputs<'_>, samples: usize, seed: u64) -> Result<McBlocks, ModelError> {
    if samples < 2 {
        return Err(ModelError::invalid("sample count", "need at least two samples"));
    }
    let sampler = Sampler::new(inp)?;
    let (psi, delta, delta1) = deterministic_parts(inp)?;
    let (m, n) = (sampler.m, sampler.n);
    let dim = m * (n + 1);
    let v = inp.chain.regimes();
    let entries = dim * dim + 2 * dim + m * v;

    let per_stream = samples as u64 / STREAMS;
    let remainder = samples as u64 % STREAMS;
    let parts: Vec<EntryStats> = (0..STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let count = per_stream + u64::from(stream < remainder);
            let mut stats = EntryStats::new(entries);
            let mut phi = vec![DMatrix::zeros(m, dim); n + 1];
            let mut regimes = vec![0; m];
            let mut w = vec![DVector::zeros(m); n];
            let mut quad = DMatrix::zeros(dim, dim);
            let mut buf = vec![0.0; entries];
            for _ in 0..count {
                sampler.draw(&mut rng, &mut phi, &mut regimes, &mut w);
                quad.gemm_tr(1.0, &phi[0], &phi[0], 0.0);
                let g = psi.tr_mul(&phi[0]);
                let f = &delta1 * &phi[0];
                for j in 1..=n {
                    let p = &mut phi[j];
                    for t in 0..m {
                        p.columns_mut(t * (n + 1), n + 1).scale_mut(w[j - 1][t]);
                    }
                    quad.gemm_tr(1.0, p, p, 1.0);
                }
                buf[..dim * dim].copy_from_slice(quad.as_slice());
                buf[dim * dim..dim * dim + dim].copy_from_slice(g.as_slice());
                buf[dim * dim + dim..dim * dim + 2 * dim].copy_from_slice(f.as_slice());
                let occ = &mut buf[dim * dim + 2 * dim..];
                occ.fill(0.0);
                for (t, &q) in regimes.iter().enumerate() {
                    occ[t * v + q] = 1.0;
                }
                stats.push(&buf);
            }
            stats
        })
        .collect();
    let (mean, se) = merge(parts);

    let h = DMatrix::from_column_slice(dim, dim, &mean[..dim * dim]) + delta;
    let h_se = DMatrix::from_column_slice(dim, dim, &se[..dim * dim]);
    let g = RowDVector::from_row_slice(&mean[dim * dim..dim * dim + dim]);
    let g_se = RowDVector::from_row_slice(&se[dim * dim..dim * dim + dim]);
    let f = RowDVector::from_row_slice(&mean[dim * dim + dim..dim * dim + 2 * dim]);
    let f_se = RowDVector::from_row_slice(&se[dim * dim + dim..dim * dim + 2 * dim]);
    let base = dim * dim + 2 * dim;
    let occupancy = (0..m)
        .map(|t| DVector::from_row_slice(&mean[base + t * v..base + (t + 1) * v]))
        .collect();
    let occupancy_se = (0..m)
        .map(|t| DVector::from_row_slice(&se[base + t * v..base + (t + 1) * v]))
        .collect();
    Ok(McBlocks {
        h,
        h_se,
        g,
        g_se,
        f,
        f_se,
        occupancy,
        occupancy_se,
        samples,
    })
}

/// Largest `|estimate - reference| / se` over all entries. Entries with a
/// zero standard error must agree to within `exact_tol`; a mismatch there
/// yields infinity.
pub fn max_standardized_error(reference: &[f64], estimate: &[f64], se: &[f64], exact_tol: f64) -> f64 {
    reference
        .iter()
        .zip(estimate)
        .zip(se)
        .map(|((r, e), s)| {
            let diff = (r - e).abs();
            if *s > 0.0 {
                diff / s
            } else if diff <= exact_tol {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Result of a brute-force search over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridArgmin {
    pub point: DVector<f64>,
    pub objective: f64,
    /// Grid spacing per coordinate (box width for sampled searches
    /// divided by `resolution - 1`).
    pub spacing: DVector<f64>,
    pub evaluated: usize,
}

/// Per-variable box implied by single-variable constraint rows.
fn variable_box(qp: &QuadraticProgram) -> Result<Vec<(f64, f64)>, ModelError> {
    let a = &qp.constraint_operator;
    let dim = qp.dimension();
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); dim];
    for r in 0..a.nrows() {
        let nz: Vec<usize> = (0..dim).filter(|&c| a[(r, c)] != 0.0).collect();
        if nz.len() != 1 {
            continue;
        }
        let c = nz[0];
        let coef = a[(r, c)];
        let (lo, hi) = if coef > 0.0 {
            (qp.lower[r] / coef, qp.upper[r] / coef)
        } else {
            (qp.upper[r] / coef, qp.lower[r] / coef)
        };
        bounds[c].0 = bounds[c].0.max(lo);
        bounds[c].1 = bounds[c].1.min(hi);
    }
    if let Some(c) = bounds.iter().position(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
        return Err(ModelError::invalid("grid search", format!("variable {c} has no finite box")));
    }
    Ok(bounds)
}

const SAMPLED_POINTS: usize = 1_000_000;

/// Best feasible point of the QP over a uniform grid with `resolution`
/// points per coordinate, box corners included. When the full grid would
/// exceed 2·10^6 points, 10^6 uniform samples of the box (fixed seed)
/// are searched instead.
pub fn grid_argmin(qp: &QuadraticProgram, resolution: usize) -> Result<GridArgmin, ModelError> {
    if resolution < 2 {
        return Err(ModelError::invalid("grid resolution", "need at least two points per axis"));
    }
    let bounds = variable_box(qp)?;
    let dim = bounds.len();
    let spacing = DVector::from_iterator(dim, bounds.iter().map(|(lo, hi)| (hi - lo) / (resolution - 1) as f64));
    let feasible_tol = 1e-12;

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut consider = |x: &DVector<f64>| {
        if qp.violation(x) > feasible_tol {
            return;
        }
        let obj = qp.objective(x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x.clone()));
        }
    };

    let total = (resolution as f64).powi(dim as i32);
    let mut x = DVector::zeros(dim);
    let evaluated;
    if total <= 2.0e6 {
        let mut idx = vec![0usize; dim];
        let mut count = 0;
        loop {
            for c in 0..dim {
                x[c] = if idx[c] == resolution - 1 {
                    bounds[c].1
                } else {
                    bounds[c].0 + spacing[c] * idx[c] as f64
                };
            }
            consider(&x);
            count += 1;
            let mut c = 0;
            loop {
                if c == dim {
                    break;
                }
                idx[c] += 1;
                if idx[c] < resolution {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
            if c == dim {
                break;
            }
        }
        evaluated = count;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..SAMPLED_POINTS {
            for c in 0..dim {
                x[c] = rng.random_range(bounds[c].0..=bounds[c].1);
            }
            consider(&x);
        }
        evaluated = SAMPLED_POINTS;
    }
    let (objective, point) =
        best.ok_or_else(|| ModelError::invalid("grid search", "no feasible grid point"))?;
    Ok(GridArgmin {
        point,
        objective,
        spacing,
        evaluated,
    })
}

/// Monte-Carlo means of the tracking criterion in its benchmark form and
/// in its reduced form (control-independent terms dropped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionEstimate {
    pub tracking: f64,
    pub tracking_se: f64,
    pub reduced: f64,
    pub reduced_se: f64,
}

/// Simulates `m`-step wealth paths under the stacked control `u` by
/// stepping the wealth recursion with sampled regimes and returns, and
/// averages
/// `sum_i (V_i - V0_i)^2 - rho_i (V_i - V0_i) + u_(i-1)' R u_(i-1)` and
/// `sum_i V_i^2 - R1_i V_i + u_(i-1)' R u_(i-1)`.
pub fn sample_criteria(
    inp: &StepInputs<'_>,
    wealth: f64,
    u: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<CriterionEstimate, ModelError> {
    let sampler = Sampler::new(inp)?;
    let (m, n) = (sampler.m, sampler.n);
    let width = n + 1;
    ModelError::check_dim("stacked control", m * width, u.len())?;
    let controls: Vec<AllocationVector> = (0..m)
        .map(|i| AllocationVector::new(u.rows(i * width, width).into_owned()))
        .collect::<Result<_, _>>()?;
    let penalty: f64 = (0..m)
        .map(|i| {
            let r = inp.config.control_cost(inp.k, i);
            let c = controls[i].as_vector();
            (r * c).dot(c)
        })
        .sum();
    let target: Vec<f64> = (1..=m).map(|i| inp.config.benchmark().value(inp.k + i)).collect();
    let rho: Vec<f64> = (1..=m).map(|i| inp.config.rho(inp.k, i)).collect();

    let parts: Vec<EntryStats> = (0..STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let count = samples as u64 / STREAMS + u64::from(stream < samples as u64 % STREAMS);
            let mut stats = EntryStats::new(2);
            for _ in 0..count {
                let mut state = sampler.initial_state(&mut rng);
                let mut value = wealth;
                let (mut tracking, mut reduced) = (penalty, penalty);
                for i in 0..m {
                    state = sampler.chain.successor(state, rng.random());
                    let params = &inp.model.regimes()[state];
                    let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let eta = params.mu() + params.sigma() * w;
                    value = wealth_step(inp.model, value, &controls[i], &eta).expect("validated inputs");
                    let gap = value - target[i];
                    tracking += gap * gap - rho[i] * gap;
                    reduced += value * value - (2.0 * target[i] + rho[i]) * value;
                }
                stats.push(&[tracking, reduced]);
            }
            stats
        })
        .collect();
    let (mean, se) = merge(parts);
    Ok(CriterionEstimate {
        tracking: mean[0],
        tracking_se: se[0],
        reduced: mean[1],
        reduced_se: se[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::RegimeParameters;
    use crate::markov_chain::RegimeIndicator;
    use crate::mpc_controller::{build_g, build_h, Benchmark, ConstraintMode, ConstraintSpec, PredictionConfig};
    use approx::assert_abs_diff_eq;

    fn config(m: usize, n: usize) -> PredictionConfig {
        PredictionConfig::diagonal(m, n, 1e-4, 0.1, Benchmark::geometric(1.0, 0.0015, 32).unwrap()).unwrap()
    }

    #[test]
    fn single_regime_phi_is_deterministic() {
        let model = MarketModel::new(
            vec![RegimeParameters::diagonal(DVector::from_vec(vec![0.001, 0.002]), 0.01).unwrap()],
            0.0001,
            0.0002,
        )
        .unwrap();
        let chain = TransitionMatrix::identity(1);
        let theta = RegimeIndicator::observed(1, 0).unwrap();
        let cfg = config(3, 2);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_stacked(&inp, &mut rng).unwrap();
        let b0 = oracle_row(&model, 0, 0);
        let a: f64 = 1.0001;
        for i in 0..3 {
            for t in 0..3 {
                let block = RowDVector::from_iterator(3, s.phi[0].view((i, t * 3), (1, 3)).iter().copied());
                if t > i {
                    assert_eq!(block, RowDVector::zeros(3));
                } else {
                    assert_abs_diff_eq!(block, &b0 * a.powi((i - t) as i32), epsilon = 1e-18);
                }
            }
        }
        assert_abs_diff_eq!(s.psi, DVector::from_vec(vec![a, a * a, a * a * a]), epsilon = 1e-15);
    }

    #[test]
    fn horizon_one_phi_is_single_row() {
        let model = MarketModel::new(
            vec![
                RegimeParameters::diagonal(DVector::from_element(1, 0.001), 0.01).unwrap(),
                RegimeParameters::diagonal(DVector::from_element(1, -0.001), 0.03).unwrap(),
            ],
            0.0,
            0.0,
        )
        .unwrap();
        let chain = TransitionMatrix::from_row_slice(2, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let theta = RegimeIndicator::observed(2, 0).unwrap();
        let cfg = config(1, 1);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let s = sample_stacked(&inp, &mut rng).unwrap();
            let q = s.regimes[0];
            assert_eq!(s.phi[0].row(0).into_owned(), oracle_row(&model, q, 0));
            assert_eq!(s.phi[1].row(0).into_owned(), oracle_row(&model, q, 1));
        }
    }

    #[test]
    fn regime_paths_are_reproducible_under_seed() {
        let model = MarketModel::new(
            vec![
                RegimeParameters::diagonal(DVector::from_element(1, 0.001), 0.01).unwrap(),
                RegimeParameters::diagonal(DVector::from_element(1, 0.0), 0.02).unwrap(),
            ],
            0.0,
            0.0,
        )
        .unwrap();
        let chain = TransitionMatrix::from_row_slice(2, &[0.7, 0.4, 0.3, 0.6]).unwrap();
        let theta = RegimeIndicator::observed(2, 1).unwrap();
        let cfg = config(2, 1);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_stacked(&inp, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn noiseless_single_regime_estimate_is_exact() {
        let model = MarketModel::new(
            vec![RegimeParameters::diagonal(DVector::from_vec(vec![0.001, 0.003]), 0.0).unwrap()],
            0.0,
            0.0,
        )
        .unwrap();
        let chain = TransitionMatrix::identity(1);
        let theta = RegimeIndicator::observed(1, 0).unwrap();
        let cfg = config(3, 2);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        let mc = mc_blocks(&inp, 10_000, 4).unwrap();
        let h = build_h(&inp).unwrap();
        assert_abs_diff_eq!(mc.h, h, epsilon = 1e-15);
        assert_abs_diff_eq!(mc.g, build_g(&inp).unwrap(), epsilon = 1e-15);
        assert!(mc.h_se.amax() < 1e-15);
    }

    #[test]
    fn merge_matches_two_pass_statistics() {
        let data: Vec<f64> = (0..1000).map(|i| 1e4 + ((i * 37) % 101) as f64 * 0.01).collect();
        let mut parts = vec![EntryStats::new(1), EntryStats::new(1), EntryStats::new(1)];
        for (i, x) in data.iter().enumerate() {
            parts[i % 3].push(&[*x]);
        }
        let (mean, se) = merge(parts);
        let n = data.len() as f64;
        let m = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(mean[0], m, epsilon = 1e-9);
        assert_abs_diff_eq!(se[0], (var / n).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn grid_recovers_clamped_box_solution() {
        let qp = QuadraticProgram {
            h: DMatrix::identity(2, 2) * 2.0,
            linear: DVector::from_vec(vec![-2.0, -2.0]),
            constraint_operator: DMatrix::identity(2, 2),
            lower: DVector::zeros(2),
            upper: DVector::from_element(2, 0.25),
        };
        for res in [2, 6, 11] {
            let g = grid_argmin(&qp, res).unwrap();
            assert_abs_diff_eq!(g.point, DVector::from_element(2, 0.25), epsilon = 1e-15);
        }
    }

    #[test]
    fn grid_converges_to_unconstrained_minimizer() {
        let qp = QuadraticProgram {
            h: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])),
            linear: DVector::from_vec(vec![-0.7, 0.9]),
            constraint_operator: DMatrix::identity(2, 2),
            lower: DVector::from_element(2, -1.0),
            upper: DVector::from_element(2, 1.0),
        };
        let exact = DVector::from_vec(vec![0.35, -0.15]);
        let mut last = f64::INFINITY;
        for res in [11, 101, 1001] {
            let err = (grid_argmin(&qp, res).unwrap().point - &exact).amax();
            assert!(err <= last);
            last = err;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn grid_needs_a_finite_box() {
        let qp = QuadraticProgram {
            h: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            constraint_operator: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            lower: DVector::zeros(1),
            upper: DVector::from_element(1, 1.0),
        };
        assert!(grid_argmin(&qp, 5).is_err());
    }

    #[test]
    fn grid_on_controller_instance_matches_solver() {
        let model = MarketModel::new(
            vec![
                RegimeParameters::diagonal(DVector::from_element(1, 0.002), 0.01).unwrap(),
                RegimeParameters::diagonal(DVector::from_element(1, -0.001), 0.02).unwrap(),
            ],
            0.0,
            0.0001,
        )
        .unwrap();
        let chain = TransitionMatrix::from_row_slice(2, &[0.96, 0.24, 0.04, 0.76]).unwrap();
        let theta = RegimeIndicator::observed(2, 0).unwrap();
        let cfg = config(1, 1);
        let inp = StepInputs { chain: &chain, theta: &theta, model: &model, config: &cfg, k: 0 };
        let spec = ConstraintSpec::uniform(1, -0.6, 3.0, ConstraintMode::FirstBlock).unwrap();
        let qp = crate::mpc_controller::assemble_qp(&inp, &spec, 1.0).unwrap();
        let sol = qp.solve(1e-9).unwrap();
        let grid = grid_argmin(&qp, 1001).unwrap();
        assert!(sol.objective <= grid.objective + 1e-12);
        assert!((sol.minimizer.clone() - &grid.point).abs().iter().zip(grid.spacing.iter()).all(|(d, s)| *d <= *s));
    }
}
