//! Finite-state Markov chain in indicator-vector form.
//!
//! The chain state at step `k` is carried as the one-hot vector `theta(k)`
//! whose dynamics are `theta(k+1) = P theta(k) + nu(k+1)` with `nu` a
//! martingale increment. This forces a **column-stochastic** transition
//! matrix: entry `(i, j)` is the probability of moving *from* regime `j`
//! *to* regime `i`, and every column sums to one.
//!
//! Regimes are indexed from zero in this API.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::ModelError;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Column-stochastic transition matrix of a `v`-state chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, ModelError> {
        let v = entries.nrows();
        if v == 0 {
            return Err(ModelError::invalid("transition matrix", "no regimes"));
        }
        ModelError::check_dim("transition matrix columns", v, entries.ncols())?;
        for (j, col) in entries.column_iter().enumerate() {
            if col.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(ModelError::invalid(
                    "transition matrix",
                    format!("column {j} has an entry outside [0, 1]"),
                ));
            }
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ModelError::invalid(
                    "transition matrix",
                    format!("column {j} sums to {sum}, expected 1"),
                ));
            }
        }
        Ok(Self { entries })
    }

    /// Builds from row-major entries, e.g. `[[0.96, 0.24], [0.04, 0.76]]`
    /// is `from_row_slice(2, &[0.96, 0.24, 0.04, 0.76])`.
    pub fn from_row_slice(v: usize, entries: &[f64]) -> Result<Self, ModelError> {
        ModelError::check_dim("transition matrix entries", v * v, entries.len())?;
        Self::new(DMatrix::from_row_slice(v, v, entries))
    }

    pub fn identity(v: usize) -> Self {
        Self {
            entries: DMatrix::identity(v, v),
        }
    }

    pub fn regimes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// `P^t`.
    pub fn power(&self, t: usize) -> DMatrix<f64> {
        let v = self.regimes();
        let mut acc = DMatrix::identity(v, v);
        let mut base = self.entries.clone();
        let mut e = t;
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// Draws the successor of `from` given a uniform variate in `[0, 1)`.
    pub fn successor(&self, from: usize, uniform: f64) -> usize {
        let col = self.entries.column(from);
        let mut acc = 0.0;
        for (i, p) in col.iter().enumerate() {
            acc += p;
            if uniform < acc {
                return i;
            }
        }
        // rounding in the cumulative sum; fall back to the last reachable state
        col.iter().rposition(|p| *p > 0.0).unwrap_or(from)
    }

    /// Simulates `len` states starting from `initial`.
    pub fn sample_path<R: Rng + ?Sized>(&self, initial: usize, len: usize, rng: &mut R) -> Vec<usize> {
        let mut states = Vec::with_capacity(len);
        let mut current = initial;
        for i in 0..len {
            if i > 0 {
                current = self.successor(current, rng.random::<f64>());
            }
            states.push(current);
        }
        states
    }

    /// Stationary distribution `pi = P pi`, solved directly.
    ///
    /// Only meaningful for irreducible chains; reducible chains return one
    /// of the stationary vectors or an error if the linear system is singular.
    pub fn stationary_distribution(&self) -> Result<DVector<f64>, ModelError> {
        let v = self.regimes();
        let mut system = &self.entries - DMatrix::identity(v, v);
        let mut rhs = DVector::zeros(v);
        for j in 0..v {
            system[(v - 1, j)] = 1.0;
        }
        rhs[v - 1] = 1.0;
        system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| ModelError::invalid("transition matrix", "chain is not irreducible"))
    }
}

/// Probability vector over regimes; one-hot when it encodes an observed state.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeIndicator {
    theta: DVector<f64>,
}

impl RegimeIndicator {
    pub fn new(theta: DVector<f64>) -> Result<Self, ModelError> {
        if theta.is_empty() {
            return Err(ModelError::invalid("regime indicator", "empty vector"));
        }
        if theta.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ModelError::invalid("regime indicator", "negative or non-finite entry"));
        }
        let sum: f64 = theta.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(ModelError::invalid(
                "regime indicator",
                format!("entries sum to {sum}, expected 1"),
            ));
        }
        Ok(Self { theta })
    }

    /// Kronecker indicator of an observed regime.
    pub fn observed(v: usize, regime: usize) -> Result<Self, ModelError> {
        if regime >= v {
            return Err(ModelError::IndexOutOfRange {
                what: "regime",
                index: regime,
                limit: v,
            });
        }
        let mut theta = DVector::zeros(v);
        theta[regime] = 1.0;
        Ok(Self { theta })
    }

    pub fn regimes(&self) -> usize {
        self.theta.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.theta
    }
}

/// Observed regime path, one entry per trading day.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeSequence {
    states: Vec<usize>,
    regimes: usize,
}

impl RegimeSequence {
    pub fn new(states: Vec<usize>, regimes: usize) -> Result<Self, ModelError> {
        if let Some(&bad) = states.iter().find(|&&s| s >= regimes) {
            return Err(ModelError::IndexOutOfRange {
                what: "regime",
                index: bad,
                limit: regimes,
            });
        }
        Ok(Self { states, regimes })
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of days spent in each regime.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.regimes];
        for &s in &self.states {
            counts[s] += 1;
        }
        counts
    }
}

fn check_pair(p: &TransitionMatrix, theta: &RegimeIndicator) -> Result<(), ModelError> {
    ModelError::check_dim("regime indicator", p.regimes(), theta.regimes())
}

/// `P^t theta`: the regime distribution `t` steps ahead.
pub fn propagate(p: &TransitionMatrix, theta: &RegimeIndicator, t: usize) -> Result<DVector<f64>, ModelError> {
    check_pair(p, theta)?;
    let mut dist = theta.theta.clone();
    for _ in 0..t {
        dist = p.matrix() * dist;
    }
    Ok(dist)
}

/// Conditional covariance of the indicator innovation,
/// `diag(P theta) - P diag(theta) P^T`.
pub fn martingale_covariance(p: &TransitionMatrix, theta: &RegimeIndicator) -> Result<DMatrix<f64>, ModelError> {
    check_pair(p, theta)?;
    let pm = p.matrix();
    let next = pm * &theta.theta;
    let cov = DMatrix::from_diagonal(&next) - pm * DMatrix::from_diagonal(&theta.theta) * pm.transpose();
    // exact symmetry
    Ok((&cov + cov.transpose()) * 0.5)
}

/// `E[theta(k+t) theta(k+f)^T | theta(k)] = diag(P^t theta) (P^(f-t))^T` for `t <= f`.
///
/// Entry `(q, r)` is the probability of being in regime `q` at `k+t` and in
/// regime `r` at `k+f`.
pub fn joint_occupancy(
    p: &TransitionMatrix,
    theta: &RegimeIndicator,
    t: usize,
    f: usize,
) -> Result<DMatrix<f64>, ModelError> {
    if t > f {
        return Err(ModelError::invalid(
            "joint occupancy offsets",
            format!("t = {t} exceeds f = {f}"),
        ));
    }
    let marginal = propagate(p, theta, t)?;
    Ok(DMatrix::from_diagonal(&marginal) * p.power(f - t).transpose())
}

/// Maximum-likelihood transition matrix together with the regimes that
/// never appeared as a transition source.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEstimate {
    pub matrix: TransitionMatrix,
    pub unvisited: Vec<usize>,
}

/// Counts transitions in `seq` and normalizes each source column.
///
/// A regime never observed as a source gets a self-loop column and is listed
/// in [`TransitionEstimate::unvisited`].
pub fn estimate_transition_matrix(seq: &RegimeSequence, v: usize) -> Result<TransitionEstimate, ModelError> {
    if v == 0 {
        return Err(ModelError::invalid("regime count", "must be at least 1"));
    }
    if seq.len() < 2 {
        return Err(ModelError::InsufficientHistory {
            needed: 2,
            available: seq.len(),
        });
    }
    if let Some(&bad) = seq.states().iter().find(|&&s| s >= v) {
        return Err(ModelError::IndexOutOfRange {
            what: "regime",
            index: bad,
            limit: v,
        });
    }
    let mut counts = DMatrix::<f64>::zeros(v, v);
    for pair in seq.states().windows(2) {
        counts[(pair[1], pair[0])] += 1.0;
    }
    let mut unvisited = Vec::new();
    for j in 0..v {
        let total: f64 = counts.column(j).sum();
        if total == 0.0 {
            warn!("regime {} never left in estimation window; using a self-loop", j + 1);
            counts[(j, j)] = 1.0;
            unvisited.push(j);
        } else {
            counts.column_mut(j).unscale_mut(total);
        }
    }
    Ok(TransitionEstimate {
        matrix: TransitionMatrix::new(counts)?,
        unvisited,
    })
}
