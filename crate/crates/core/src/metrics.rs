//! Run metrics: survival, gain (or loss), efficiency, equality, over-usage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, Direction, ResourceState, EPS};
use crate::engine::RunRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric needs a {expected:?} record, got {actual:?}")]
    WrongDirection { expected: Direction, actual: Direction },
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("no records to aggregate")]
    Empty,
    #[error("cannot aggregate records with different directions")]
    MixedDirections,
}

fn expect_direction(record: &RunRecord, expected: Direction) -> Result<(), MetricError> {
    let actual = record.direction();
    if actual != expected {
        return Err(MetricError::WrongDirection { expected, actual });
    }
    Ok(())
}

/// Months the resource stayed viable.
///
/// For a good: the month in which it collapsed (that month's harvest still
/// happened), or the horizon. For a bad: the number of months that ended
/// below capacity, so immediate failure scores 0.
pub fn survival_time(record: &RunRecord) -> u32 {
    let params = &record.config.scenario.dynamics;
    match params.direction {
        Direction::HarvestGood => record
            .months
            .iter()
            .find(|m| m.collapsed_during)
            .map(|m| m.month)
            .unwrap_or(params.horizon)
            .max(1),
        Direction::RemoveBad => record
            .months
            .iter()
            .filter(|m| m.amount_after_regrowth < params.capacity)
            .count() as u32,
    }
}

fn mean_total(record: &RunRecord) -> f64 {
    let n = record.per_agent_totals.len();
    if n == 0 {
        return 0.0;
    }
    record.per_agent_totals.iter().sum::<f64>() / n as f64
}

/// Mean per-agent harvest over the run.
pub fn total_gain(record: &RunRecord) -> Result<f64, MetricError> {
    expect_direction(record, Direction::HarvestGood)?;
    Ok(mean_total(record))
}

/// `max(0, loss_constant - mean per-agent removal)` for a public bad.
pub fn total_loss(record: &RunRecord) -> Result<f64, MetricError> {
    expect_direction(record, Direction::RemoveBad)?;
    Ok((record.config.scenario.loss_constant - mean_total(record)).max(0.0))
}

/// Gain relative to harvesting the full-stock fair share every month; for a
/// bad, removal relative to the loss constant. Capped at 100.
pub fn efficiency(record: &RunRecord) -> Result<f64, MetricError> {
    let sc = &record.config.scenario;
    match sc.dynamics.direction {
        Direction::HarvestGood => {
            let full = ResourceState {
                amount: sc.dynamics.capacity,
                month: 0,
                collapsed: false,
            };
            let ceiling = dynamics::fair_share(&full, &sc.dynamics, sc.n_agents) * sc.dynamics.horizon as f64;
            if ceiling <= 0.0 {
                return Err(MetricError::Undefined("zero maximum gain"));
            }
            Ok((100.0 * mean_total(record) / ceiling).min(100.0))
        }
        Direction::RemoveBad => {
            if sc.loss_constant <= 0.0 {
                return Err(MetricError::Undefined("zero loss constant"));
            }
            Ok((100.0 * mean_total(record) / sc.loss_constant).min(100.0))
        }
    }
}

/// Gini coefficient via the sorted-rank form; 0 for an all-zero vector.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum();
    let n = n as f64;
    (2.0 * weighted / (n * total) - (n + 1.0) / n).max(0.0)
}

/// `100 * (1 - gini)` of per-agent totals.
pub fn equality(record: &RunRecord) -> f64 {
    100.0 * (1.0 - gini(&record.per_agent_totals))
}

/// Percentage of agent-month actions beyond the fair share (for a bad:
/// short of it), counted through the collapse month.
pub fn over_usage(record: &RunRecord) -> Result<f64, MetricError> {
    let direction = record.direction();
    let (mut over, mut total) = (0usize, 0usize);
    for m in &record.months {
        for &r in &m.requests {
            total += 1;
            let deviates = match direction {
                Direction::HarvestGood => r > m.fair_share + EPS,
                Direction::RemoveBad => r + EPS < m.fair_share,
            };
            if deviates {
                over += 1;
            }
        }
    }
    if total == 0 {
        return Err(MetricError::Undefined("no actions"));
    }
    Ok(100.0 * over as f64 / total as f64)
}

/// The five per-run metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub survival_time: f64,
    pub gain_or_loss: f64,
    pub efficiency: f64,
    pub equality: f64,
    pub over_usage: f64,
}

impl RunMetrics {
    pub fn of(record: &RunRecord) -> Result<Self, MetricError> {
        let gain_or_loss = match record.direction() {
            Direction::HarvestGood => total_gain(record)?,
            Direction::RemoveBad => total_loss(record)?,
        };
        Ok(Self {
            survival_time: survival_time(record) as f64,
            gain_or_loss,
            efficiency: efficiency(record)?,
            equality: equality(record),
            over_usage: over_usage(record)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample (n-1) standard deviation; std is 0 for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub direction: Direction,
    pub runs: usize,
    pub survival_rate: f64,
    pub survival_time: MeanStd,
    pub gain_or_loss: MeanStd,
    pub efficiency: MeanStd,
    pub equality: MeanStd,
    pub over_usage: MeanStd,
}

impl MetricsSummary {
    /// Summarizes per-run metrics; a run survives when it reached `horizon`.
    pub fn from_runs(direction: Direction, horizon: u32, runs: &[RunMetrics]) -> Result<Self, MetricError> {
        if runs.is_empty() {
            return Err(MetricError::Empty);
        }
        let col = |f: fn(&RunMetrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let survived = runs.iter().filter(|r| r.survival_time >= horizon as f64).count();
        Ok(Self {
            direction,
            runs: runs.len(),
            survival_rate: survived as f64 / runs.len() as f64,
            survival_time: col(|r| r.survival_time),
            gain_or_loss: col(|r| r.gain_or_loss),
            efficiency: col(|r| r.efficiency),
            equality: col(|r| r.equality),
            over_usage: col(|r| r.over_usage),
        })
    }
}

/// Mean ± sample std of every metric across runs of one configuration.
pub fn aggregate(records: &[RunRecord]) -> Result<MetricsSummary, MetricError> {
    let first = records.first().ok_or(MetricError::Empty)?;
    let direction = first.direction();
    if records.iter().any(|r| r.direction() != direction) {
        return Err(MetricError::MixedDirections);
    }
    let runs = records.iter().map(RunMetrics::of).collect::<Result<Vec<_>, _>>()?;
    MetricsSummary::from_runs(direction, first.config.scenario.dynamics.horizon, &runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gini_double_sum(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let total: f64 = v.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for a in v {
            for b in v {
                s += (a - b).abs();
            }
        }
        s / (2.0 * n * total)
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[20.0; 5]), 0.0);
        assert_eq!(gini(&[0.0; 5]), 0.0);
        // double sum: 400 / (2 * 5 * 150)
        let v = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert!((gini_double_sum(&v) - 4.0 / 15.0).abs() < 1e-12);
        assert!((gini(&v) - 4.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[3.0, 4.0, 12.0]);
        assert!((m.mean - 19.0 / 3.0).abs() < 1e-12);
        assert!((m.std - (73.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[5.0]).std, 0.0);
    }

    #[test]
    fn survival_rate_from_runs() {
        let run = |t: f64| RunMetrics {
            survival_time: t,
            gain_or_loss: 0.0,
            efficiency: 0.0,
            equality: 100.0,
            over_usage: 0.0,
        };
        let s = MetricsSummary::from_runs(Direction::HarvestGood, 12, &[run(3.0), run(4.0), run(12.0)]).unwrap();
        assert!((s.survival_rate - 1.0 / 3.0).abs() < 1e-12);
        let s = MetricsSummary::from_runs(Direction::HarvestGood, 12, &[run(12.0); 3]).unwrap();
        assert_eq!(s.survival_rate, 1.0);
        assert_eq!(
            MetricsSummary::from_runs(Direction::HarvestGood, 12, &[]),
            Err(MetricError::Empty)
        );
    }

    proptest! {
        #[test]
        fn gini_matches_double_sum(v in proptest::collection::vec(0u32..=100, 1..=8)) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            prop_assert!((gini(&v) - gini_double_sum(&v)).abs() < 1e-9);
        }

        #[test]
        fn gini_is_permutation_and_scale_invariant(
            v in proptest::collection::vec(0u32..=100, 1..=8),
            k in 1u32..50,
        ) {
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let mut rev = v.clone();
            rev.reverse();
            let scaled: Vec<f64> = v.iter().map(|x| x * k as f64).collect();
            prop_assert!((gini(&v) - gini(&rev)).abs() < 1e-12);
            prop_assert!((gini(&v) - gini(&scaled)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&gini(&v)));
        }
    }
}
