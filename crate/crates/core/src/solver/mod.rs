//! Exact peak-memory scheduling.
//!
//! Two independent routes:
//!
//! * [`brute_force`] enumerates every topological order of a small graph. It
//!   exists to check everything else.
//! * [`solve`] is a best-first branch-and-bound over *executed sets*. Which
//!   tensors are resident after a set of operators has run does not depend on
//!   the order they ran in, so the best peak reaching a set is all that needs
//!   remembering about it.
//!
//! [`solve_model`] and [`decode_ilp_solution`] close the loop with the ILP
//! formulation in [`crate::ilp`].

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::footprint::Schedule;
use crate::graph::ComputationGraph;

mod brute;
mod model;
mod search;

pub use brute::{brute_force, BRUTE_FORCE_LIMIT};
pub use model::{decode_ilp_solution, solve_model, DecodeError, ModelSolution};
pub use search::greedy_schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    ExactBb,
    BruteForce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolverConfig {
    pub time_limit: Duration,
    /// Cap on expanded states; `None` means unbounded.
    pub node_limit: Option<u64>,
    pub mode: SolverMode,
    /// Only used by randomized stress tests; the search itself breaks ties by
    /// discovery order.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            time_limit: Duration::from_secs(30),
            node_limit: None,
            mode: SolverMode::ExactBb,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_time_limit(mut self, limit: Duration) -> Self {
        self.time_limit = limit;
        self
    }

    pub fn with_node_limit(mut self, limit: u64) -> Self {
        self.node_limit = Some(limit);
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.time_limit.is_zero() {
            return Err(SolverError::InvalidConfig("time_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    /// The time limit hit; the result holds the best incumbent.
    TimeLimit,
    NodeLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveResult {
    pub schedule: Schedule,
    pub peak: i64,
    pub proven_optimal: bool,
    pub explored_states: u64,
    pub wall_time: Duration,
    pub stop: StopReason,
    /// Number of topological orders, when the brute-force route ran.
    pub legal_orders: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("brute force is limited to {limit} operators, graph has {ops}")]
    TooLarge { ops: usize, limit: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Minimum-peak schedule of `g` under `cfg`.
///
/// Hypernodes need no special handling: their workspace term already carries
/// the fused sub-graph's internal peak.
pub fn solve(g: &ComputationGraph, cfg: &SolverConfig) -> Result<SolveResult, SolverError> {
    cfg.validate()?;
    match cfg.mode {
        SolverMode::BruteForce => brute_force(g),
        SolverMode::ExactBb => Ok(search::branch_and_bound(g, cfg)),
    }
}
