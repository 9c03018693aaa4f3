//! Receding-horizon benchmark tracking for portfolios in regime-switching
//! markets.
//!
//! The market follows a finite Markov chain whose state sets the mean and
//! volatility of asset returns. At each trading day the controller solves a
//! convex QP over an `m`-step horizon and applies the first allocation.

pub mod backtest;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimation;
pub mod market_model;
pub mod markov_chain;
pub mod mpc_controller;
pub mod oracle;
pub mod qp_solver;
pub mod synthetic;

pub use error::{ModelError, MpcError, QpError};
pub use market_model::{AllocationVector, MarketModel, RegimeParameters};
pub use markov_chain::{RegimeIndicator, RegimeSequence, TransitionMatrix};
pub use mpc_controller::{mpc_step, ConstraintMode, ConstraintSpec, PredictionConfig, StepInputs};
