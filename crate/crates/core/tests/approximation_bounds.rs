//! Cost bounds against the exhaustive optimum at `log β` on random
//! instances with up to 12 clients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use truthfed_core::experiments::random_instance;
use truthfed_core::mechanism::{brute_force_opt, ordered_budget_search, truthful_incentive_search};
use truthfed_core::CoverageInstance;

fn instances(base: u64, count: u64) -> impl Iterator<Item = CoverageInstance> {
    (0..count).map(move |k| {
        let mut r = ChaCha8Rng::seed_from_u64(base + k);
        let n = r.random_range(2..=12);
        let d = r.random_range(1..=3);
        let beta = r.random_range(0.05..0.95);
        random_instance(&mut r, n, d, beta)
    })
}

#[test]
fn truthful_search_cost_within_one_plus_eps_of_opt() {
    let eps = 1.0;
    let bad: Vec<String> = instances(500, 100)
        .filter_map(|inst| {
            let out = truthful_incentive_search(&inst, eps).unwrap();
            let cost = inst.total_reported_cost(&out.selected);
            let (_, opt) = brute_force_opt(&inst).unwrap();
            (cost > (1.0 + eps) * opt * (1.0 + 1e-12)).then(|| format!("{cost:.3} vs OPT {opt:.3}"))
        })
        .collect();
    assert!(bad.is_empty(), "{} of 100 over the bound, e.g. {:?}", bad.len(), &bad[..bad.len().min(3)]);
}

#[test]
fn truthful_search_meets_relaxed_coverage() {
    for inst in instances(500, 100) {
        let out = truthful_incentive_search(&inst, 1.0).unwrap();
        assert!(out.coverage_achieved >= inst.relaxed_threshold() - 1e-9);
    }
}

#[test]
fn ordered_budget_cost_within_max_report_plus_opt() {
    let bad: Vec<String> = instances(900, 100)
        .filter_map(|inst| {
            let out = ordered_budget_search(&inst).unwrap();
            let cost = inst.total_reported_cost(&out.selected);
            let (_, opt) = brute_force_opt(&inst).unwrap();
            let max = inst.reported_costs.iter().copied().fold(0.0, f64::max);
            (cost > max + opt + 1e-9).then(|| format!("{cost:.3} vs {max:.3} + {opt:.3}"))
        })
        .collect();
    assert!(bad.is_empty(), "{} of 100 over the bound, e.g. {:?}", bad.len(), &bad[..bad.len().min(3)]);
}

#[test]
fn ordered_budget_meets_relaxed_coverage() {
    for inst in instances(900, 100) {
        let out = ordered_budget_search(&inst).unwrap();
        assert!(out.coverage_achieved >= inst.relaxed_threshold() - 1e-9);
    }
}
