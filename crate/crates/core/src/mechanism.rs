//! Participant selection over the log-determinant coverage function
//!
//! ```text
//! g(S) = log det(V_last + Σ_{j∈S} ΔV_j + λI) − log det(V_last + Σ_{all j} ΔV_j + λI)
//! ```
//!
//! `g` is monotone and submodular, non-positive, and zero at the full client
//! set. Selection rules pick a cheap set `S` (by reported cost) whose
//! coverage clears a threshold derived from `β`:
//!
//! * [`truthful_incentive_search`]: geometric budget search around a
//!   budgeted cost-ratio greedy; clears `(1 − e⁻¹)·log β`.
//! * [`vanilla_greedy_search`]: unbudgeted cost-ratio greedy; clears `log β`.
//! * [`ordered_budget_search`]: budget grows by the greedy cost ranking;
//!   clears `(1 − e⁻¹)·log β`.
//! * [`brute_force_opt`]: exhaustive minimum-cost set clearing `log β`.
//!
//! Excluding a client (for critical-value reruns) removes it from the
//! candidate pool but never from the denominator of `g`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_det, PsdMatrix};
use crate::ClientId;

/// Absolute tolerance on every coverage-vs-threshold comparison.
pub const COVERAGE_TOL: f64 = 1e-12;

/// Largest client count [`brute_force_opt`] will enumerate.
pub const MAX_ENUMERATION_CLIENTS: usize = 20;

/// `1 − e⁻¹`
pub fn relaxation_factor() -> f64 {
    1.0 - (-1.0f64).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageInstance {
    pub v_last: PsdMatrix,
    pub deltas: Arc<Vec<PsdMatrix>>,
    pub reported_costs: Vec<f64>,
    pub beta: f64,
    pub ridge: f64,
}

impl CoverageInstance {
    pub fn new(
        v_last: PsdMatrix,
        deltas: Vec<PsdMatrix>,
        reported_costs: Vec<f64>,
        beta: f64,
        ridge: f64,
    ) -> Result<Self> {
        if deltas.len() != reported_costs.len() {
            return Err(Error::DimensionMismatch {
                expected: deltas.len(),
                found: reported_costs.len(),
            });
        }
        for d in &deltas {
            if d.dim() != v_last.dim() {
                return Err(Error::DimensionMismatch {
                    expected: v_last.dim(),
                    found: d.dim(),
                });
            }
        }
        if let Some(c) = reported_costs.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
            return Err(Error::NonPositiveReport(*c));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1]"));
        }
        if !(ridge > 0.0) {
            return Err(Error::config("lambda", "must be positive"));
        }
        Ok(CoverageInstance {
            v_last,
            deltas: Arc::new(deltas),
            reported_costs,
            beta,
            ridge,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.deltas.len()
    }

    pub fn dim(&self) -> usize {
        self.v_last.dim()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = ClientId> {
        0..self.num_clients()
    }

    /// Same instance with client `i` reporting `cost` instead.
    pub fn with_report(&self, i: ClientId, cost: f64) -> Result<Self> {
        self.check_id(i)?;
        if !(cost > 0.0) || !cost.is_finite() {
            return Err(Error::NonPositiveReport(cost));
        }
        let mut out = self.clone();
        out.reported_costs[i] = cost;
        Ok(out)
    }

    /// `(1 − e⁻¹)·log β`
    pub fn relaxed_threshold(&self) -> f64 {
        relaxation_factor() * self.beta.ln()
    }

    /// `log β`
    pub fn original_threshold(&self) -> f64 {
        self.beta.ln()
    }

    pub(crate) fn check_id(&self, i: ClientId) -> Result<()> {
        if i >= self.num_clients() {
            return Err(Error::UnknownClientId(i));
        }
        Ok(())
    }

    fn full_log_det(&self) -> Result<f64> {
        let mut all = self.v_last.clone();
        for d in self.deltas.iter() {
            all.add_assign(d)?;
        }
        log_det(&all, self.ridge)
    }

    pub fn total_reported_cost(&self, s: &[ClientId]) -> f64 {
        s.iter().map(|&i| self.reported_costs[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected clients in the order they were added.
    pub selected: Vec<ClientId>,
    pub terminating_budget: Option<f64>,
    pub coverage_achieved: f64,
    /// Budget-loop iterations (budget increases) performed.
    pub iterations: usize,
    /// Threshold this rule had to clear.
    pub threshold: f64,
    /// `log β`, the unrelaxed constraint.
    pub original_threshold: f64,
}

impl SelectionResult {
    pub fn contains(&self, i: ClientId) -> bool {
        self.selected.contains(&i)
    }

    pub fn sorted(&self) -> Vec<ClientId> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }
}

pub(crate) fn satisfies(coverage: f64, threshold: f64) -> bool {
    coverage >= threshold - COVERAGE_TOL
}

/// `g(s)`; members of `s` are summed in the order given.
pub fn coverage(inst: &CoverageInstance, s: &[ClientId]) -> Result<f64> {
    let full = inst.full_log_det()?;
    Engine::coverage_with(inst, full, s)
}

/// `g(s ∪ {j}) − g(s)`
pub fn marginal_gain(inst: &CoverageInstance, s: &[ClientId], j: ClientId) -> Result<f64> {
    inst.check_id(j)?;
    if s.contains(&j) {
        return Err(Error::AlreadySelected(j));
    }
    let mut with_j = s.to_vec();
    with_j.push(j);
    Ok(coverage(inst, &with_j)? - coverage(inst, s)?)
}

/// Budgeted cost-ratio greedy. Returns clients in selection order.
pub fn greedy_under_budget(inst: &CoverageInstance, budget: f64) -> Result<Vec<ClientId>> {
    Ok(Engine::new(inst, None)?.greedy(budget)?.order)
}

pub fn truthful_incentive_search(inst: &CoverageInstance, epsilon: f64) -> Result<SelectionResult> {
    Engine::new(inst, None)?.truthful_search(epsilon)
}

pub fn vanilla_greedy_search(inst: &CoverageInstance) -> Result<SelectionResult> {
    Engine::new(inst, None)?.vanilla()
}

pub fn ordered_budget_search(inst: &CoverageInstance) -> Result<SelectionResult> {
    Engine::new(inst, None)?.ordered_budget()
}

/// Exhaustive minimum-cost set with `g(S) ≥ log β`. Ties prefer fewer
/// clients, then the lexicographically smallest id list.
pub fn brute_force_opt(inst: &CoverageInstance) -> Result<(Vec<ClientId>, f64)> {
    brute_force_opt_at(inst, inst.original_threshold())
}

/// [`brute_force_opt`] against an arbitrary coverage threshold.
pub fn brute_force_opt_at(
    inst: &CoverageInstance,
    threshold: f64,
) -> Result<(Vec<ClientId>, f64)> {
    let n = inst.num_clients();
    if n > MAX_ENUMERATION_CLIENTS {
        return Err(Error::TooManyClients(n));
    }
    let full = inst.full_log_det()?;
    let mut best: Option<(f64, Vec<ClientId>)> = None;
    for mask in 0u32..(1u32 << n) {
        let s: Vec<ClientId> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let cost = inst.total_reported_cost(&s);
        if let Some((bc, bs)) = &best {
            let worse = cost > *bc
                || (cost == *bc && (s.len() > bs.len() || (s.len() == bs.len() && s >= *bs)));
            if worse {
                continue;
            }
        }
        if satisfies(Engine::coverage_with(inst, full, &s)?, threshold) {
            best = Some((cost, s));
        }
    }
    best.map(|(c, s)| (s, c)).ok_or(Error::Infeasible)
}

/// Which selection rule a round runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    TruthFedban,
    VanillaGreedy,
    OrderedBudget,
    /// Every client holding new data participates, paid its report.
    SelectAll,
    /// No communication at all.
    None,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 5] = [
        MechanismKind::TruthFedban,
        MechanismKind::VanillaGreedy,
        MechanismKind::OrderedBudget,
        MechanismKind::SelectAll,
        MechanismKind::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::TruthFedban => "truth_fedban",
            MechanismKind::VanillaGreedy => "vanilla_greedy",
            MechanismKind::OrderedBudget => "ordered_budget",
            MechanismKind::SelectAll => "select_all",
            MechanismKind::None => "none",
        }
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MechanismKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mechanism", format!("unknown mechanism `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub kind: MechanismKind,
    pub epsilon: f64,
}

impl SelectionRule {
    pub fn new(kind: MechanismKind, epsilon: f64) -> Self {
        SelectionRule { kind, epsilon }
    }

    pub fn select(&self, inst: &CoverageInstance) -> Result<SelectionResult> {
        self.select_excluding(inst, None)
    }

    /// Runs the rule with `excluded` removed from the candidate pool.
    pub fn select_excluding(
        &self,
        inst: &CoverageInstance,
        excluded: Option<ClientId>,
    ) -> Result<SelectionResult> {
        let engine = Engine::new(inst, excluded)?;
        match self.kind {
            MechanismKind::TruthFedban => engine.truthful_search(self.epsilon),
            MechanismKind::VanillaGreedy => engine.vanilla(),
            MechanismKind::OrderedBudget => engine.ordered_budget(),
            MechanismKind::SelectAll => {
                let all = engine
                    .candidates
                    .iter()
                    .copied()
                    .filter(|&j| !inst.deltas[j].is_zero())
                    .collect();
                engine.result(all, None, 0, inst.original_threshold())
            }
            MechanismKind::None => engine.result(Vec::new(), None, 0, f64::NEG_INFINITY),
        }
    }

    /// Coverage level the rule must reach; feasibility of reruns is judged
    /// against it.
    pub fn threshold(&self, inst: &CoverageInstance) -> f64 {
        match self.kind {
            MechanismKind::TruthFedban | MechanismKind::OrderedBudget => inst.relaxed_threshold(),
            MechanismKind::VanillaGreedy | MechanismKind::SelectAll => inst.original_threshold(),
            MechanismKind::None => f64::NEG_INFINITY,
        }
    }
}

/// Smallest `k` with `(1 + ε)^k ≥ x`.
///
/// Budgets are drawn from this fixed lattice rather than scaled from the
/// cheapest report, so moving one report only adds or removes lattice points
/// below every other client's cost.
fn lattice_index_at_least(x: f64, epsilon: f64) -> i32 {
    let base = 1.0 + epsilon;
    let mut k = (x.ln() / base.ln()).ceil() as i32;
    while base.powi(k) < x {
        k += 1;
    }
    while base.powi(k - 1) >= x {
        k -= 1;
    }
    k
}

/// A greedy run: selection order plus, for each step, the accumulated matrix
/// and log-det the step was scored against.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub order: Vec<ClientId>,
    pub prefix_mats: Vec<PsdMatrix>,
    pub prefix_log_dets: Vec<f64>,
    pub log_det: f64,
}

/// Shared evaluation state for one instance and one candidate pool.
pub(crate) struct Engine<'a> {
    inst: &'a CoverageInstance,
    full_log_det: f64,
    candidates: Vec<ClientId>,
}

impl<'a> Engine<'a> {
    pub fn new(inst: &'a CoverageInstance, excluded: Option<ClientId>) -> Result<Self> {
        if let Some(i) = excluded {
            inst.check_id(i)?;
        }
        Ok(Engine {
            inst,
            full_log_det: inst.full_log_det()?,
            candidates: inst.client_ids().filter(|&j| Some(j) != excluded).collect(),
        })
    }

    fn coverage_with(inst: &CoverageInstance, full: f64, s: &[ClientId]) -> Result<f64> {
        let mut acc = inst.v_last.clone();
        for &i in s {
            inst.check_id(i)?;
            acc.add_assign(&inst.deltas[i])?;
        }
        Ok(log_det(&acc, inst.ridge)? - full)
    }

    pub fn coverage(&self, s: &[ClientId]) -> Result<f64> {
        Self::coverage_with(self.inst, self.full_log_det, s)
    }

    /// log det of `acc + ΔV_j + λI`
    pub fn log_det_with(&self, acc: &PsdMatrix, j: ClientId) -> Result<f64> {
        log_det(&acc.add(&self.inst.deltas[j])?, self.inst.ridge)
    }

    /// Best positive-gain ratio among unselected candidates passing `allowed`.
    fn best_step(
        &self,
        acc: &PsdMatrix,
        acc_log_det: f64,
        taken: &[bool],
        allowed: impl Fn(ClientId) -> bool,
    ) -> Result<Option<(ClientId, f64)>> {
        let mut best: Option<(ClientId, f64, f64)> = None;
        for &j in &self.candidates {
            if taken[j] || !allowed(j) {
                continue;
            }
            let gain = self.log_det_with(acc, j)? - acc_log_det;
            if !(gain > 0.0) {
                continue;
            }
            let ratio = gain / self.inst.reported_costs[j];
            if best.is_none_or(|(_, r, _)| ratio > r) {
                best = Some((j, ratio, gain));
            }
        }
        Ok(best.map(|(j, _, g)| (j, g)))
    }

    fn run_greedy(
        &self,
        budget: Option<f64>,
        stop_at: Option<f64>,
        include_zero_gain: bool,
    ) -> Result<Trace> {
        let n = self.inst.num_clients();
        let costs = &self.inst.reported_costs;
        let mut taken = vec![false; n];
        let mut acc = self.inst.v_last.clone();
        let mut acc_ld = log_det(&acc, self.inst.ridge)?;
        let mut spent = 0.0;
        let mut trace = Trace {
            order: Vec::new(),
            prefix_mats: Vec::new(),
            prefix_log_dets: Vec::new(),
            log_det: acc_ld,
        };
        loop {
            if let Some(thr) = stop_at {
                if satisfies(acc_ld - self.full_log_det, thr) {
                    break;
                }
            }
            let step = self.best_step(&acc, acc_ld, &taken, |j| {
                budget.is_none_or(|b| spent + costs[j] <= b)
            })?;
            let (j, gain) = match step {
                Some(s) => s,
                // ranking mode: what is left adds nothing, append by id
                None if include_zero_gain => {
                    match self.candidates.iter().copied().find(|&j| !taken[j]) {
                        Some(j) => (j, 0.0),
                        None => break,
                    }
                }
                None => break,
            };
            trace.prefix_mats.push(acc.clone());
            trace.prefix_log_dets.push(acc_ld);
            taken[j] = true;
            spent += costs[j];
            acc.add_assign(&self.inst.deltas[j])?;
            acc_ld = if gain > 0.0 {
                acc_ld + gain
            } else {
                log_det(&acc, self.inst.ridge)?
            };
            trace.order.push(j);
        }
        trace.log_det = acc_ld;
        Ok(trace)
    }

    pub fn greedy(&self, budget: f64) -> Result<Trace> {
        self.run_greedy(Some(budget), None, false)
    }

    pub fn pool_coverage(&self) -> Result<f64> {
        self.coverage(&self.candidates)
    }

    fn result(
        &self,
        selected: Vec<ClientId>,
        budget: Option<f64>,
        iterations: usize,
        threshold: f64,
    ) -> Result<SelectionResult> {
        Ok(SelectionResult {
            coverage_achieved: self.coverage(&selected)?,
            selected,
            terminating_budget: budget,
            iterations,
            threshold,
            original_threshold: self.inst.original_threshold(),
        })
    }

    fn pool_costs(&self) -> impl Iterator<Item = f64> + '_ {
        self.candidates.iter().map(|&j| self.inst.reported_costs[j])
    }

    /// Budget-loop bound `⌈log_{1+ε}(Σ D̂ / min D̂)⌉` over the candidate pool.
    pub fn iteration_bound(&self, epsilon: f64) -> usize {
        let total: f64 = self.pool_costs().sum();
        let min = self.pool_costs().fold(f64::INFINITY, f64::min);
        ((total / min).ln() / (1.0 + epsilon).ln()).ceil().max(0.0) as usize
    }

    pub fn truthful_search(&self, epsilon: f64) -> Result<SelectionResult> {
        if !(epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        let threshold = self.inst.relaxed_threshold();
        if satisfies(self.coverage(&[])?, threshold) {
            return self.result(Vec::new(), None, 0, threshold);
        }
        if !satisfies(self.pool_coverage()?, threshold) {
            return Err(Error::Infeasible);
        }
        let total: f64 = self.pool_costs().sum();
        let min = self.pool_costs().fold(f64::INFINITY, f64::min);
        let mut k = lattice_index_at_least(min, epsilon);
        let mut budget = (1.0 + epsilon).powi(k);
        let mut trace = self.greedy(budget)?;
        let mut iterations = 0;
        while !satisfies(trace.log_det - self.full_log_det, threshold) {
            if budget >= total {
                // everything was affordable; only reachable through round-off
                return Err(Error::Infeasible);
            }
            k += 1;
            budget = (1.0 + epsilon).powi(k);
            trace = self.greedy(budget)?;
            iterations += 1;
        }
        let bound = self.iteration_bound(epsilon);
        assert!(
            iterations <= bound,
            "budget loop ran {iterations} iterations, bound is {bound}"
        );
        self.result(trace.order, Some(budget), iterations, threshold)
    }

    pub fn vanilla_trace(&self) -> Result<Trace> {
        let threshold = self.inst.original_threshold();
        let trace = self.run_greedy(None, Some(threshold), false)?;
        if !satisfies(trace.log_det - self.full_log_det, threshold) {
            return Err(Error::Infeasible);
        }
        Ok(trace)
    }

    pub fn vanilla(&self) -> Result<SelectionResult> {
        let trace = self.vanilla_trace()?;
        self.result(trace.order, None, 0, self.inst.original_threshold())
    }

    /// Costs of every candidate ranked by unbudgeted greedy ratio.
    pub fn ordered_costs(&self) -> Result<Vec<f64>> {
        let trace = self.run_greedy(None, None, true)?;
        Ok(trace
            .order
            .iter()
            .map(|&j| self.inst.reported_costs[j])
            .collect())
    }

    pub fn ordered_budget(&self) -> Result<SelectionResult> {
        let threshold = self.inst.relaxed_threshold();
        if !satisfies(self.pool_coverage()?, threshold) {
            return Err(Error::Infeasible);
        }
        let ranked = self.ordered_costs()?;
        let mut selected = Vec::new();
        let mut coverage = self.coverage(&[])?;
        let mut budget = 0.0;
        let mut k = 0;
        while !satisfies(coverage, threshold) {
            let Some(step) = ranked.get(k) else {
                return Err(Error::Infeasible);
            };
            budget += step;
            let trace = self.greedy(budget)?;
            coverage = trace.log_det - self.full_log_det;
            selected = trace.order;
            k += 1;
        }
        self.result(selected, Some(budget), k, threshold)
    }
}
