//! Resource state machine shared by every scenario.
//!
//! A month consists of extraction (harvesting fish, or removing trash),
//! followed by regrowth of whatever remains. The same arithmetic serves both
//! directions: for [`Direction::HarvestGood`] the stock is something agents
//! want and collapse means running out; for [`Direction::RemoveBad`] the stock
//! is a public bad and collapse means it reached capacity.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when comparing resource quantities.
pub const EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("expected {expected} requests (one per agent), got {actual}")]
    RequestCountMismatch { expected: usize, actual: usize },
    #[error("request {index} is not a nonnegative finite quantity: {value}")]
    InvalidRequest { index: usize, value: f64 },
    #[error("cannot extract from a collapsed resource")]
    Collapsed,
    #[error("invalid dynamics parameters: {0}")]
    InvalidParams(String),
}

/// Whether the shared stock is a good to harvest or a bad to remove.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HarvestGood,
    RemoveBad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub struct DynamicsParams {
    pub capacity: f64,
    pub growth_factor: f64,
    pub collapse_threshold: f64,
    pub horizon: u32,
    pub initial_amount: f64,
    pub direction: Direction,
}

impl DynamicsParams {
    /// Lake of 100 tons, doubling monthly, collapsing below 5, for 12 months.
    pub fn harvest_default() -> Self {
        Self {
            capacity: 100.0,
            growth_factor: 2.0,
            collapse_threshold: 5.0,
            horizon: 12,
            initial_amount: 100.0,
            direction: Direction::HarvestGood,
        }
    }

    /// Trash starts at half capacity so that doing nothing fills it in one month.
    pub fn remove_default() -> Self {
        Self {
            initial_amount: 50.0,
            direction: Direction::RemoveBad,
            ..Self::harvest_default()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::InvalidParams(msg));
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return bad(format!("capacity must be positive, got {}", self.capacity));
        }
        if !(self.growth_factor.is_finite() && self.growth_factor >= 1.0) {
            return bad(format!("growth factor must be >= 1, got {}", self.growth_factor));
        }
        if !(self.collapse_threshold >= 0.0 && self.collapse_threshold < self.capacity) {
            return bad(format!(
                "collapse threshold must lie in [0, capacity), got {}",
                self.collapse_threshold
            ));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least one month".into());
        }
        if !(self.initial_amount >= 0.0 && self.initial_amount <= self.capacity) {
            return bad(format!(
                "initial amount must lie in [0, capacity], got {}",
                self.initial_amount
            ));
        }
        Ok(())
    }
}

/// The single mutable truth of a run: how much of the stock exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceState {
    pub amount: f64,
    pub month: u32,
    pub collapsed: bool,
}

impl ResourceState {
    pub fn initial(params: &DynamicsParams) -> Self {
        Self {
            amount: params.initial_amount,
            month: 0,
            collapsed: false,
        }
    }

    /// Moves to the next month without touching the amount.
    pub fn advance_month(self) -> Self {
        Self {
            month: self.month + 1,
            ..self
        }
    }

    /// Marks the state collapsed if the collapse rule holds; never un-collapses.
    pub fn with_collapse_check(self, params: &DynamicsParams) -> Self {
        Self {
            collapsed: self.collapsed || check_collapse(&self, params),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub per_agent: Vec<f64>,
    pub total_extracted: f64,
}

/// End-of-month regrowth, saturating at capacity.
pub fn regrow(state: &ResourceState, params: &DynamicsParams) -> ResourceState {
    ResourceState {
        amount: (params.growth_factor * state.amount).min(params.capacity),
        ..*state
    }
}

pub fn check_collapse(state: &ResourceState, params: &DynamicsParams) -> bool {
    match params.direction {
        Direction::HarvestGood => state.amount < params.collapse_threshold,
        Direction::RemoveBad => state.amount >= params.capacity,
    }
}

/// Total extraction at which the stock is exactly preserved across regrowth.
///
/// For a good this is the largest harvest that keeps the amount from
/// shrinking; for a bad it is the smallest removal that keeps it from
/// growing. Both equal `amount * (1 - 1/g)` below capacity.
pub fn sustainability_threshold(state: &ResourceState, params: &DynamicsParams) -> f64 {
    let amount = state.amount.clamp(0.0, params.capacity);
    amount * (1.0 - 1.0 / params.growth_factor)
}

/// Per-agent quota: the sustainability threshold split evenly.
pub fn fair_share(state: &ResourceState, params: &DynamicsParams, n_agents: usize) -> f64 {
    assert!(n_agents >= 1, "fair share needs at least one agent");
    sustainability_threshold(state, params) / n_agents as f64
}

/// Applies one month's extraction requests to the stock.
///
/// When the requests fit, everybody gets what they asked for. Under
/// contention, agents are served in a uniformly random order, each taking
/// `min(request, remaining)`.
pub fn allocate<R: Rng + ?Sized>(
    requests: &[f64],
    n_agents: usize,
    state: &ResourceState,
    rng: &mut R,
) -> Result<(AllocationResult, ResourceState), DynamicsError> {
    if requests.len() != n_agents {
        return Err(DynamicsError::RequestCountMismatch {
            expected: n_agents,
            actual: requests.len(),
        });
    }
    if state.collapsed {
        return Err(DynamicsError::Collapsed);
    }
    if let Some((index, &value)) = requests
        .iter()
        .enumerate()
        .find(|(_, r)| !(r.is_finite() && **r >= 0.0))
    {
        return Err(DynamicsError::InvalidRequest { index, value });
    }

    let demanded: f64 = requests.iter().sum();
    let per_agent = if demanded <= state.amount + EPS {
        requests.to_vec()
    } else {
        let mut order: Vec<usize> = (0..requests.len()).collect();
        order.shuffle(rng);
        let mut remaining = state.amount;
        let mut granted = vec![0.0; requests.len()];
        for i in order {
            let take = requests[i].min(remaining);
            granted[i] = take;
            remaining -= take;
        }
        granted
    };
    let total_extracted: f64 = per_agent.iter().sum();
    let after = ResourceState {
        amount: (state.amount - total_extracted).max(0.0),
        ..*state
    };
    Ok((
        AllocationResult {
            per_agent,
            total_extracted,
        },
        after,
    ))
}
