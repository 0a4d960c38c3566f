//! Client reporting behaviour and per-client utility bookkeeping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    Truthful,
    /// Reports `factor` times the current true cost.
    Multiplicative { factor: f64 },
    /// Reports a constant.
    Fixed { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportingStrategy {
    #[serde(flatten)]
    pub kind: StrategyKind,
    /// Steps before this one report truthfully.
    #[serde(default)]
    pub applies_from_step: u64,
}

impl ReportingStrategy {
    pub fn truthful() -> Self {
        ReportingStrategy {
            kind: StrategyKind::Truthful,
            applies_from_step: 0,
        }
    }

    pub fn multiplicative(factor: f64) -> Self {
        ReportingStrategy {
            kind: StrategyKind::Multiplicative { factor },
            applies_from_step: 0,
        }
    }

    pub fn fixed(value: f64) -> Self {
        ReportingStrategy {
            kind: StrategyKind::Fixed { value },
            applies_from_step: 0,
        }
    }

    pub fn is_truthful(&self) -> bool {
        matches!(self.kind, StrategyKind::Truthful)
    }

    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Truthful => "truthful".to_string(),
            StrategyKind::Multiplicative { factor } => format!("x{factor}"),
            StrategyKind::Fixed { value } => format!("fixed{value}"),
        }
    }
}

impl Default for ReportingStrategy {
    fn default() -> Self {
        Self::truthful()
    }
}

pub fn make_report(strategy: &ReportingStrategy, true_cost: f64, t: u64) -> Result<f64> {
    let report = if t < strategy.applies_from_step {
        true_cost
    } else {
        match strategy.kind {
            StrategyKind::Truthful => true_cost,
            StrategyKind::Multiplicative { factor } => factor * true_cost,
            StrategyKind::Fixed { value } => value,
        }
    };
    if !(report > 0.0) || !report.is_finite() {
        return Err(Error::NonPositiveReport(report));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Under,
    Over,
}

impl Direction {
    /// Multiplier pointing in this direction: `factor` and `1/factor` are
    /// treated alike.
    pub fn multiplier(self, factor: f64) -> f64 {
        let (lo, hi) = if factor < 1.0 {
            (factor, 1.0 / factor)
        } else {
            (1.0 / factor, factor)
        };
        match self {
            Direction::Under => lo,
            Direction::Over => hi,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Under => "under",
            Direction::Over => "over",
        }
    }
}

/// `⌊ratio·n⌋` clients, chosen by a seeded shuffle, misreport by
/// `direction.multiplier(factor)`; the rest are truthful.
pub fn assign_population(
    n: usize,
    ratio: f64,
    direction: Direction,
    factor: f64,
    seed: u64,
) -> Result<Vec<ReportingStrategy>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("misreport_ratio", "must lie in [0, 1]"));
    }
    if !(factor > 0.0) {
        return Err(Error::config("factor", "must be positive"));
    }
    let count = (ratio * n as f64).floor() as usize;
    let mut ids: Vec<ClientId> = (0..n).collect();
    ids.shuffle(&mut stream_rng(seed, Stream::Population, 0));
    let mut out = vec![ReportingStrategy::truthful(); n];
    for &i in &ids[..count] {
        out[i] = ReportingStrategy::multiplicative(direction.multiplier(factor));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientAccount {
    pub incentives: f64,
    pub cost: f64,
    pub utility: f64,
    pub regret: f64,
    pub rounds_selected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityLedger {
    accounts: Vec<ClientAccount>,
}

impl UtilityLedger {
    pub fn new(n: usize) -> Self {
        UtilityLedger {
            accounts: vec![ClientAccount::default(); n],
        }
    }

    /// Books one round for a selected client.
    pub fn record_participation(&mut self, i: ClientId, payment: f64, true_cost: f64) {
        let a = &mut self.accounts[i];
        a.incentives += payment;
        a.cost += true_cost;
        a.utility += payment - true_cost;
        a.rounds_selected += 1;
    }

    pub fn record_regret(&mut self, i: ClientId, r: f64) {
        self.accounts[i].regret += r;
    }

    pub fn account(&self, i: ClientId) -> &ClientAccount {
        &self.accounts[i]
    }

    pub fn accounts(&self) -> &[ClientAccount] {
        &self.accounts
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.accounts.iter().map(|a| a.utility).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_examples() {
        assert_eq!(make_report(&ReportingStrategy::truthful(), 7.3, 1).unwrap(), 7.3);
        assert_eq!(make_report(&ReportingStrategy::multiplicative(0.5), 10.0, 1).unwrap(), 5.0);
        assert_eq!(make_report(&ReportingStrategy::multiplicative(2.0), 10.0, 1).unwrap(), 20.0);
        assert_eq!(make_report(&ReportingStrategy::fixed(3.0), 10.0, 1).unwrap(), 3.0);
        assert!(matches!(
            make_report(&ReportingStrategy::fixed(0.0), 10.0, 1),
            Err(Error::NonPositiveReport(_))
        ));
        let late = ReportingStrategy {
            kind: StrategyKind::Multiplicative { factor: 3.0 },
            applies_from_step: 5,
        };
        assert_eq!(make_report(&late, 2.0, 4).unwrap(), 2.0);
        assert_eq!(make_report(&late, 2.0, 5).unwrap(), 6.0);
    }

    #[test]
    fn population_examples() {
        let none = assign_population(25, 0.0, Direction::Under, 0.5, 1).unwrap();
        assert!(none.iter().all(|s| s.is_truthful()));
        let all = assign_population(25, 1.0, Direction::Over, 0.5, 1).unwrap();
        assert!(all
            .iter()
            .all(|s| s.kind == StrategyKind::Multiplicative { factor: 2.0 }));
        let half = assign_population(25, 0.5, Direction::Under, 2.0, 9).unwrap();
        assert_eq!(half.iter().filter(|s| !s.is_truthful()).count(), 12);
        assert_eq!(half, assign_population(25, 0.5, Direction::Under, 2.0, 9).unwrap());
        assert!(half
            .iter()
            .filter(|s| !s.is_truthful())
            .all(|s| s.kind == StrategyKind::Multiplicative { factor: 0.5 }));
        assert!(assign_population(5, 1.5, Direction::Under, 2.0, 9).is_err());
    }

    #[test]
    fn ledger_identity() {
        let mut l = UtilityLedger::new(2);
        let rounds = [(3.0, 2.5), (1.0, 1.25), (4.5, 0.5)];
        for (p, c) in rounds {
            l.record_participation(1, p, c);
        }
        let want: f64 = rounds.iter().map(|(p, c)| p - c).sum();
        assert!((l.account(1).utility - want).abs() < 1e-9);
        assert_eq!(l.account(1).rounds_selected, 3);
        assert_eq!(l.account(0), &ClientAccount::default());
    }

    #[test]
    fn strategy_json_shape() {
        let s: ReportingStrategy =
            serde_json::from_str(r#"{"kind":"multiplicative","factor":0.5}"#).unwrap();
        assert_eq!(s, ReportingStrategy::multiplicative(0.5));
        let t: ReportingStrategy = serde_json::from_str(r#"{"kind":"truthful"}"#).unwrap();
        assert!(t.is_truthful());
    }
}
