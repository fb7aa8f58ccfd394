//! Computation-resource allocation for a three-phase cascading recommender.
//!
//! A request flows through three elastic phases: choose a subset of retrieval
//! channels, truncate the candidate queue, and pick a prediction model. Each
//! phase has its own CR (computation resource) budget per time slice. This
//! crate models the problem as per-request MDPs coupled only through those
//! budgets and provides:
//!
//! - a synthetic, oracle-checkable environment ([`sim`]);
//! - a multi-head Q-network with a cost-calibration layer ([`qnet`]);
//! - offline DDQN/BCQ/REM training with an adaptive multiplier loop ([`train`]);
//! - post-training multiplier correction by per-slice bisection ([`correct`]);
//! - static, DCAF-style, and CEM-trained baselines ([`baselines`]);
//! - a PID load controller ([`control`]) and a serving loop ([`serving`]);
//! - file formats for datasets, checkpoints, tables, and telemetry ([`io`]).

// Validation uses `!(x > 0.0)` on purpose: unlike `x <= 0.0` it also rejects
// NaN, which is exactly what the guards are for.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod control;
pub mod correct;
pub mod domain;
pub mod error;
pub mod io;
pub mod metrics;
pub mod qnet;
pub mod rng;
pub mod serving;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
