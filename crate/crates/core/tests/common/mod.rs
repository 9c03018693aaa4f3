#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use regime_mpc::mpc_controller::Benchmark;
use regime_mpc::{MarketModel, PredictionConfig, RegimeIndicator, RegimeParameters, TransitionMatrix};

pub fn random_chain<R: Rng>(rng: &mut R, v: usize) -> TransitionMatrix {
    let mut p = DMatrix::from_fn(v, v, |_, _| rng.random_range(0.05..1.0));
    for mut c in p.column_iter_mut() {
        let s = c.sum();
        c /= s;
    }
    TransitionMatrix::new(p).unwrap()
}

pub fn random_theta<R: Rng>(rng: &mut R, v: usize) -> RegimeIndicator {
    let mut t = DVector::from_fn(v, |_, _| rng.random_range(0.0..1.0));
    t /= t.sum();
    RegimeIndicator::new(t).unwrap()
}

/// Means in [-0.002, 0.004], diagonal volatilities in [0.005, 0.03] with
/// small off-diagonal loadings, `r1 <= r2` below 0.1 %.
pub fn random_model<R: Rng>(rng: &mut R, v: usize, n: usize) -> MarketModel {
    let regimes = (0..v)
        .map(|_| {
            let mu = DVector::from_fn(n, |_, _| rng.random_range(-0.002..0.004));
            let sigma = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    rng.random_range(0.005..0.03)
                } else {
                    rng.random_range(-0.005..0.005)
                }
            });
            RegimeParameters::new(mu, sigma).unwrap()
        })
        .collect();
    let r1 = rng.random_range(0.0..0.0005);
    let r2 = r1 + rng.random_range(0.0..0.0005);
    MarketModel::new(regimes, r1, r2).unwrap()
}

/// `R = 1e-4 I`, `rho = 0.1`, benchmark growing 0.15 % per step from 1.
pub fn paper_prediction(m: usize, n: usize) -> PredictionConfig {
    PredictionConfig::diagonal(m, n, 1e-4, 0.1, Benchmark::geometric(1.0, 0.0015, 64).unwrap()).unwrap()
}

pub fn micex() -> TransitionMatrix {
    TransitionMatrix::from_row_slice(2, &[0.96, 0.24, 0.04, 0.76]).unwrap()
}
