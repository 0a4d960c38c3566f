//! Paper-configuration checks on the comparison and micro studies.

use truthfed_core::experiments::{run_comparison, run_micro_study, ExperimentConfig};
use truthfed_core::{MechanismKind, ReportingStrategy};

#[test]
fn full_participation_beats_learning_alone_on_every_seed() {
    let cfg = ExperimentConfig::default();
    let v = run_comparison(&cfg, &[MechanismKind::None, MechanismKind::SelectAll]).unwrap();
    for (alone, shared) in v[0].runs.iter().zip(&v[1].runs) {
        let (a, s) = (
            alone.metrics.final_value("cumulative_regret"),
            shared.metrics.final_value("cumulative_regret"),
        );
        assert!(s <= a, "seed {}: {s} > {a}", alone.seed);
    }
    // sub-linear: the second half adds less regret than the first
    let r = &v[1].aggregate.series["cumulative_regret"].mean;
    let half = r.len() / 2;
    assert!(r[r.len() - 1] - r[half - 1] < r[half - 1]);
    assert_eq!(v[0].aggregate.rounds_mean, 0.0);
}

#[test]
fn micro_study_misreporting_does_not_pay() {
    let cfg = ExperimentConfig::default();
    let grid: Vec<ReportingStrategy> =
        [0.1, 0.5, 2.0, 10.0].map(ReportingStrategy::multiplicative).to_vec();
    let mut bad = Vec::new();
    for client in [0, 7] {
        let t = run_micro_study(&cfg, client, &grid).unwrap();
        let honest = t.truthful();
        bad.extend(
            t.rows[1..]
                .iter()
                .filter(|r| r.utility > honest.utility + 2.0 * cfg.gamma * r.rounds)
                .map(|r| format!("client {client} {}: {:.3} vs truthful {:.3}", r.strategy, r.utility, honest.utility)),
        );
    }
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn micro_study_over_reporting_normalized_utility() {
    let cfg = ExperimentConfig::default();
    for client in [0, 7] {
        let t = run_micro_study(&cfg, client, &[ReportingStrategy::multiplicative(2.0)]).unwrap();
        let tol = 2.0 * cfg.gamma * t.rows[1].rounds / t.truthful().utility.abs().max(1e-12);
        assert!(
            t.rows[1].normalized_utility <= 1.0 + tol,
            "client {client}: normalized utility {} (tolerance {tol})",
            t.rows[1].normalized_utility
        );
    }
}
