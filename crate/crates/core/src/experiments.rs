//! Experiment configs, multi-seed runs, aggregation, and output files.
//!
//! Output layout written by the `write_*` functions:
//!
//! ```text
//! <dir>/aggregate.csv                step,variant,metric,mean,std
//! <dir>/<variant>/seed_<s>.csv       step,metric,value
//! <dir>/<variant>/seed_<s>_rounds.jsonl
//! <dir>/summary.json
//! <dir>/plots/<metric>.svg
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{sample_sphere, stream_rng, Stream};
use crate::error::{Error, Result};
use crate::linalg::PsdMatrix;
use crate::mechanism::{
    brute_force_opt, coverage, greedy_under_budget, marginal_gain, truthful_incentive_search,
    CoverageInstance, MechanismKind, SelectionRule, COVERAGE_TOL,
};
use crate::payments::{
    critical_value_bisection, critical_value_closed_form, Payment, DEFAULT_ESSENTIAL_SURROGATE,
};
use crate::protocol::{
    default_dc, run_simulation, write_round_log, Arrival, RoundRecord, RunMetrics,
    SimulationConfig,
};
use crate::strategies::{assign_population, Direction, ReportingStrategy};
use crate::ClientId;

/// Communication threshold: a number, or `"auto"` for [`default_dc`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DcSetting {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for DcSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DcSetting::Auto => s.serialize_str("auto"),
            DcSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for DcSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DcSetting::Value(v)),
            Raw::Str(s) if s == "auto" => Ok(DcSetting::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "d_c must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "assignment", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyAssignment {
    #[default]
    AllTruthful,
    /// `⌊ratio·N⌋` clients misreport, chosen per seed.
    Population {
        ratio: f64,
        direction: Direction,
        factor: f64,
    },
    /// One client follows `strategy`, the rest are truthful.
    Designated {
        client: ClientId,
        strategy: ReportingStrategy,
    },
    Explicit {
        strategies: Vec<ReportingStrategy>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(alias = "T")]
    pub horizon: u64,
    #[serde(alias = "N")]
    pub num_clients: usize,
    #[serde(alias = "d")]
    pub dim: usize,
    #[serde(alias = "K")]
    pub arms_per_step: usize,
    #[serde(alias = "sigma")]
    pub noise_sigma: f64,
    pub arm_norm_bound: f64,
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    #[serde(alias = "w")]
    pub cost_weight: f64,
    pub intrinsic_cost_low: f64,
    pub intrinsic_cost_high: f64,
    pub d_c: DcSetting,
    pub mechanism: MechanismKind,
    pub strategies: StrategyAssignment,
    pub seeds: Vec<u64>,
    pub essential_surrogate: f64,
    pub arrival: Arrival,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            horizon: 6250,
            num_clients: 25,
            dim: 5,
            arms_per_step: 20,
            noise_sigma: 0.1,
            arm_norm_bound: 1.0,
            lambda: 1.0,
            delta: 0.1,
            beta: 0.5,
            epsilon: 1.0,
            gamma: 1.0,
            cost_weight: 1e-4,
            intrinsic_cost_low: 0.0,
            intrinsic_cost_high: 100.0,
            d_c: DcSetting::Auto,
            mechanism: MechanismKind::TruthFedban,
            strategies: StrategyAssignment::AllTruthful,
            seeds: vec![1, 2, 3, 4, 5],
            essential_surrogate: DEFAULT_ESSENTIAL_SURROGATE,
            arrival: Arrival::RoundRobin,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            Error::ConfigInvalid {
                field: json_field(&e.to_string()),
                reason: e.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::ConfigFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.d_c == DcSetting::Auto && self.horizon < 3 {
            return Err(Error::config("d_c", "\"auto\" needs horizon >= 3"));
        }
        self.simulation_config(self.seeds[0]).map(|_| ())
    }

    pub fn resolved_dc(&self) -> f64 {
        match self.d_c {
            DcSetting::Auto => default_dc(
                self.horizon,
                self.num_clients,
                self.dim,
                self.lambda,
                self.beta,
            ),
            DcSetting::Value(v) => v,
        }
    }

    pub fn strategies_for(&self, seed: u64) -> Result<Vec<ReportingStrategy>> {
        let n = self.num_clients;
        match &self.strategies {
            StrategyAssignment::AllTruthful => Ok(vec![ReportingStrategy::truthful(); n]),
            StrategyAssignment::Population {
                ratio,
                direction,
                factor,
            } => assign_population(n, *ratio, *direction, *factor, seed),
            StrategyAssignment::Designated { client, strategy } => {
                if *client >= n {
                    return Err(Error::config(
                        "strategies.client",
                        format!("client {client} out of range for {n} clients"),
                    ));
                }
                let mut out = vec![ReportingStrategy::truthful(); n];
                out[*client] = *strategy;
                Ok(out)
            }
            StrategyAssignment::Explicit { strategies } => Ok(strategies.clone()),
        }
    }

    pub fn simulation_config(&self, seed: u64) -> Result<SimulationConfig> {
        let cfg = SimulationConfig {
            horizon: self.horizon,
            num_clients: self.num_clients,
            dim: self.dim,
            arms_per_step: self.arms_per_step,
            noise_sigma: self.noise_sigma,
            arm_norm_bound: self.arm_norm_bound,
            lambda: self.lambda,
            delta: self.delta,
            beta: self.beta,
            epsilon: self.epsilon,
            gamma: self.gamma,
            cost_weight: self.cost_weight,
            intrinsic_cost_low: self.intrinsic_cost_low,
            intrinsic_cost_high: self.intrinsic_cost_high,
            d_c: self.resolved_dc(),
            mechanism: self.mechanism,
            strategies: self.strategies_for(seed)?,
            essential_surrogate: self.essential_surrogate,
            arrival: self.arrival,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pulls the offending key out of a serde message such as
/// "unknown field `foo`, expected ...".
fn json_field(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_worker_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub rounds: Vec<RoundRecord>,
}

pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let out = run_simulation(&cfg.simulation_config(seed)?)?;
            Ok(SeedRun {
                seed,
                metrics: out.metrics,
                rounds: out.rounds,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-step mean and population standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub series: BTreeMap<String, SeriesStats>,
    pub rounds_mean: f64,
    pub rounds_std: f64,
}

impl Aggregate {
    pub fn from_runs(variant: &str, runs: &[SeedRun]) -> Self {
        let steps = runs.iter().map(|r| r.metrics.cumulative_regret.len()).min().unwrap_or(0);
        let mut series = BTreeMap::new();
        for name in RunMetrics::SERIES {
            let mut stats = SeriesStats {
                mean: Vec::with_capacity(steps),
                std: Vec::with_capacity(steps),
            };
            let mut column = vec![0.0; runs.len()];
            for t in 0..steps {
                for (slot, r) in column.iter_mut().zip(runs) {
                    *slot = r.metrics.series(name).map_or(0.0, |s| s[t]);
                }
                let (m, s) = mean_std(&column);
                stats.mean.push(m);
                stats.std.push(s);
            }
            series.insert(name.to_string(), stats);
        }
        let rounds: Vec<f64> = runs.iter().map(|r| r.metrics.rounds as f64).collect();
        let (rounds_mean, rounds_std) = if runs.is_empty() {
            (0.0, 0.0)
        } else {
            mean_std(&rounds)
        };
        Aggregate {
            variant: variant.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            steps,
            series,
            rounds_mean,
            rounds_std,
        }
    }

    pub fn final_mean(&self, metric: &str) -> f64 {
        self.series
            .get(metric)
            .and_then(|s| s.mean.last().copied())
            .unwrap_or(0.0)
    }

    pub fn final_std(&self, metric: &str) -> f64 {
        self.series
            .get(metric)
            .and_then(|s| s.std.last().copied())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct VariantRuns {
    pub variant: String,
    pub runs: Vec<SeedRun>,
    pub aggregate: Aggregate,
}

/// Same config and seeds, one variant per mechanism.
pub fn run_comparison(base: &ExperimentConfig, mechanisms: &[MechanismKind]) -> Result<Vec<VariantRuns>> {
    base.validate()?;
    let jobs: Vec<(MechanismKind, u64)> = mechanisms
        .iter()
        .flat_map(|&m| base.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let outs = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let cfg = ExperimentConfig {
                mechanism: m,
                ..base.clone()
            };
            let out = run_simulation(&cfg.simulation_config(seed)?)?;
            Ok(SeedRun {
                seed,
                metrics: out.metrics,
                rounds: out.rounds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mechanisms
        .iter()
        .zip(outs.chunks(base.seeds.len()))
        .map(|(m, runs)| VariantRuns {
            variant: m.name().to_string(),
            aggregate: Aggregate::from_runs(m.name(), runs),
            runs: runs.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRow {
    pub strategy: String,
    pub regret: f64,
    pub incentive: f64,
    pub utility: f64,
    pub rounds: f64,
    pub normalized_regret: f64,
    pub normalized_incentive: f64,
    pub normalized_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroTable {
    pub mechanism: MechanismKind,
    pub client: ClientId,
    pub seeds: Vec<u64>,
    pub rows: Vec<MicroRow>,
}

impl MicroTable {
    pub fn truthful(&self) -> &MicroRow {
        &self.rows[0]
    }
}

/// `value / baseline`, with `0/0` read as 1.
fn normalized(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 && value == 0.0 {
        1.0
    } else {
        value / baseline
    }
}

/// One client follows each strategy in `grid` in turn, everyone else is
/// truthful. Values are the client's seed means; the first row is the
/// all-truthful baseline.
pub fn run_micro_study(
    cfg: &ExperimentConfig,
    client: ClientId,
    grid: &[ReportingStrategy],
) -> Result<MicroTable> {
    if client >= cfg.num_clients {
        return Err(Error::config(
            "client",
            format!("client {client} out of range for {} clients", cfg.num_clients),
        ));
    }
    let mut variants = vec![ReportingStrategy::truthful()];
    variants.extend(grid.iter().filter(|s| !s.is_truthful()).copied());
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let outs = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let c = ExperimentConfig {
                strategies: StrategyAssignment::Designated {
                    client,
                    strategy: variants[v],
                },
                ..cfg.clone()
            };
            Ok(run_simulation(&c.simulation_config(seed)?)?.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.seeds.len() as f64;
    let mut rows: Vec<MicroRow> = variants
        .iter()
        .zip(outs.chunks(cfg.seeds.len()))
        .map(|(s, runs)| MicroRow {
            strategy: s.label(),
            regret: runs.iter().map(|m| m.client_regret[client]).sum::<f64>() / n,
            incentive: runs.iter().map(|m| m.client_incentives[client]).sum::<f64>() / n,
            utility: runs.iter().map(|m| m.final_utilities[client]).sum::<f64>() / n,
            rounds: runs.iter().map(|m| m.rounds as f64).sum::<f64>() / n,
            normalized_regret: 1.0,
            normalized_incentive: 1.0,
            normalized_utility: 1.0,
        })
        .collect();
    let base = rows[0].clone();
    for r in rows.iter_mut().skip(1) {
        r.normalized_regret = normalized(r.regret, base.regret);
        r.normalized_incentive = normalized(r.incentive, base.incentive);
        r.normalized_utility = normalized(r.utility, base.utility);
    }
    Ok(MicroTable {
        mechanism: cfg.mechanism,
        client,
        seeds: cfg.seeds.clone(),
        rows,
    })
}

pub const MACRO_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone)]
pub struct MacroCell {
    pub direction: Direction,
    pub ratio: f64,
    pub aggregate: Aggregate,
    /// Per-seed metrics; round logs are not kept.
    pub runs: Vec<SeedRun>,
}

impl MacroCell {
    pub fn label(&self) -> String {
        format!("{}_{}", self.direction.name(), self.ratio)
    }
}

#[derive(Debug, Clone)]
pub struct MacroGrid {
    pub factor: f64,
    pub cells: Vec<MacroCell>,
}

impl MacroGrid {
    pub fn cell(&self, direction: Direction, ratio: f64) -> Option<&MacroCell> {
        self.cells
            .iter()
            .find(|c| c.direction == direction && c.ratio == ratio)
    }
}

/// A population share `ratio` misreports by `direction.multiplier(factor)`.
pub fn run_macro_study(
    cfg: &ExperimentConfig,
    ratios: &[f64],
    directions: &[Direction],
    factor: f64,
) -> Result<MacroGrid> {
    let cells: Vec<(Direction, f64)> = directions
        .iter()
        .flat_map(|&d| ratios.iter().map(move |&r| (d, r)))
        .collect();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outs = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (direction, ratio) = cells[c];
            let e = ExperimentConfig {
                strategies: StrategyAssignment::Population {
                    ratio,
                    direction,
                    factor,
                },
                ..cfg.clone()
            };
            let out = run_simulation(&e.simulation_config(seed)?)?;
            Ok(SeedRun {
                seed,
                metrics: out.metrics,
                rounds: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = cells
        .iter()
        .zip(outs.chunks(cfg.seeds.len().max(1)))
        .map(|(&(direction, ratio), runs)| {
            let label = format!("{}_{}", direction.name(), ratio);
            MacroCell {
                direction,
                ratio,
                aggregate: Aggregate::from_runs(&label, runs),
                runs: runs.to_vec(),
            }
        })
        .collect();
    Ok(MacroGrid { factor, cells })
}

// ---------------------------------------------------------------------------
// oracle suite

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub trials: usize,
    pub max_clients: usize,
    pub max_dim: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            trials: 200,
            max_clients: 8,
            max_dim: 3,
            epsilon: 1.0,
            gamma: 1e-6,
            seed: 1,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=12).contains(&self.max_clients) {
            return Err(Error::config("max_clients", "must lie in 2..=12"));
        }
        if !(1..=3).contains(&self.max_dim) {
            return Err(Error::config("max_dim", "must lie in 1..=3"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub trial: usize,
    pub detail: String,
    pub instance: CoverageInstance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyReport {
    pub name: String,
    pub checks: u64,
    pub failures: u64,
    pub counterexamples: Vec<Counterexample>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub config: OracleConfig,
    pub properties: Vec<PropertyReport>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(PropertyReport::passed)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyReport> {
        self.properties.iter().find(|p| p.name == name)
    }
}

pub const ORACLE_PROPERTIES: [&str; 8] = [
    "submodularity",
    "budget_respect",
    "budget_monotonicity",
    "selection_monotonicity",
    "bi_criteria",
    "truthfulness",
    "individual_rationality",
    "bisection_agreement",
];

const MAX_COUNTEREXAMPLES: usize = 5;

/// Budgeted greedy used by the suite's budget checks; swappable so the suite
/// itself can be tested.
pub type GreedyFn = dyn Fn(&CoverageInstance, f64) -> Result<Vec<ClientId>> + Sync;

/// Random instance: `V_last` and each client's delta are Gram matrices of
/// 1 to 3 unit vectors; reports are uniform on (0.5, 10).
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, d: usize, beta: f64) -> CoverageInstance {
    let gram = |rng: &mut R, k: usize| {
        let xs: Vec<_> = (0..k).map(|_| sample_sphere(rng, d, 1.0)).collect();
        PsdMatrix::gram(d, &xs).expect("dimensions agree")
    };
    let v_last = gram(rng, 3);
    let deltas = (0..n)
        .map(|_| {
            let k = rng.random_range(1..4);
            gram(rng, k)
        })
        .collect();
    let costs = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
    CoverageInstance::new(v_last, deltas, costs, beta, 1.0).expect("valid random instance")
}

/// Payment owed to `i` under `rule`, or `None` if `i` is not selected.
pub fn payment_for(
    inst: &CoverageInstance,
    i: ClientId,
    rule: &SelectionRule,
    gamma: f64,
) -> Result<Option<Payment>> {
    if !rule.select(inst)?.contains(i) {
        return Ok(None);
    }
    Ok(Some(match rule.kind {
        MechanismKind::VanillaGreedy => critical_value_closed_form(inst, i)?,
        MechanismKind::SelectAll => Payment::Finite(inst.reported_costs[i]),
        _ => critical_value_bisection(inst, i, rule, gamma)?.payment,
    }))
}

/// Largest report at which `i` is still selected, located by repeatedly
/// scanning a 20-point grid and zooming into the bracketing cell until it is
/// narrower than `resolution`.
pub fn grid_scan_threshold(
    inst: &CoverageInstance,
    i: ClientId,
    rule: &SelectionRule,
    upper: f64,
    resolution: f64,
) -> Result<f64> {
    let selected_at = |r: f64| -> Result<bool> { Ok(rule.select(&inst.with_report(i, r)?)?.contains(i)) };
    let (mut lo, mut hi) = (0.0, upper);
    while hi - lo > resolution {
        let step = (hi - lo) / 20.0;
        let mut next = (lo, hi);
        for k in 1..=20 {
            let x = lo + step * k as f64;
            if !selected_at(x)? {
                next = (lo + step * (k - 1) as f64, x);
                break;
            }
        }
        if next == (lo, hi) {
            // selected across the whole bracket
            return Ok(hi);
        }
        (lo, hi) = next;
    }
    Ok(0.5 * (lo + hi))
}

struct TrialOutcome {
    checks: [u64; 8],
    failures: Vec<(usize, String)>,
}

impl TrialOutcome {
    fn check(&mut self, prop: usize, ok: bool, detail: impl FnOnce() -> String) {
        self.checks[prop] += 1;
        if !ok {
            self.failures.push((prop, detail()));
        }
    }
}

fn run_trial(cfg: &OracleConfig, trial: usize, greedy: &GreedyFn) -> Result<(CoverageInstance, TrialOutcome)> {
    let mut rng = stream_rng(cfg.seed, Stream::Oracle, trial as u64);
    let n = rng.random_range(2..=cfg.max_clients);
    let d = rng.random_range(1..=cfg.max_dim);
    let beta = rng.random_range(0.05..0.95);
    let inst = random_instance(&mut rng, n, d, beta);
    let mut out = TrialOutcome {
        checks: [0; 8],
        failures: Vec::new(),
    };

    // submodularity
    let b_set: Vec<ClientId> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    let a_set: Vec<ClientId> = b_set.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if let Some(i) = (0..n).find(|j| !b_set.contains(j)) {
        let ga = marginal_gain(&inst, &a_set, i)?;
        let gb = marginal_gain(&inst, &b_set, i)?;
        out.check(0, ga >= gb - 1e-9, || {
            format!("A={a_set:?} B={b_set:?} i={i}: gain(A)={ga} < gain(B)={gb}")
        });
    }

    // budget respect and monotonicity
    let total: f64 = inst.reported_costs.iter().sum();
    let b1 = rng.random_range(0.0..total);
    let b2 = rng.random_range(b1..=total);
    let s1 = greedy(&inst, b1)?;
    let s2 = greedy(&inst, b2)?;
    for (b, s) in [(b1, &s1), (b2, &s2)] {
        let spent = inst.total_reported_cost(s);
        out.check(1, spent <= b + 1e-12, || format!("budget {b}: spent {spent} on {s:?}"));
    }
    let (c1, c2) = (coverage(&inst, &s1)?, coverage(&inst, &s2)?);
    let same = {
        let (mut x, mut y) = (s1.clone(), s2.clone());
        x.sort_unstable();
        y.sort_unstable();
        x == y
    };
    out.check(2, same || c2 > c1 - COVERAGE_TOL, || {
        format!("b={b1} -> {s1:?} ({c1}), b'={b2} -> {s2:?} ({c2})")
    });

    // selection monotonicity
    for kind in [MechanismKind::TruthFedban, MechanismKind::VanillaGreedy] {
        let rule = SelectionRule::new(kind, cfg.epsilon);
        let sel = rule.select(&inst)?;
        for &i in &sel.selected {
            let own = inst.reported_costs[i];
            for k in 1..=10 {
                let r = own * k as f64 / 10.0;
                let kept = rule.select(&inst.with_report(i, r)?)?.contains(i);
                out.check(3, kept, || format!("{kind}: client {i} dropped at report {r} (own {own})"));
            }
        }
    }

    // bi-criteria against the exhaustive optimum
    let tis = truthful_incentive_search(&inst, cfg.epsilon)?;
    let (_, opt) = brute_force_opt(&inst)?;
    let cost = inst.total_reported_cost(&tis.selected);
    out.check(4, cost <= (1.0 + cfg.epsilon) * opt + 1e-9, || {
        format!("cost {cost} > (1+eps)*OPT = {}", (1.0 + cfg.epsilon) * opt)
    });
    let relaxed = inst.relaxed_threshold();
    out.check(4, tis.coverage_achieved >= relaxed - 1e-9, || {
        format!("coverage {} below {relaxed}", tis.coverage_achieved)
    });

    // truthfulness and individual rationality, per round
    let rule = SelectionRule::new(MechanismKind::TruthFedban, cfg.epsilon);
    let utility = |inst: &CoverageInstance, i: ClientId, true_cost: f64| -> Result<f64> {
        Ok(payment_for(inst, i, &rule, cfg.gamma)?
            .map_or(0.0, |p| p.charged(DEFAULT_ESSENTIAL_SURROGATE) - true_cost))
    };
    for i in 0..n {
        let c = inst.reported_costs[i];
        let honest = utility(&inst, i, c)?;
        if tis.contains(i) {
            out.check(6, honest >= -2.0 * cfg.gamma, || format!("client {i}: utility {honest}"));
        }
        for f in [0.1, 0.5, 2.0, 10.0] {
            let lie = utility(&inst.with_report(i, f * c)?, i, c)?;
            out.check(5, lie <= honest + 2.0 * cfg.gamma + 1e-9, || {
                format!("client {i} x{f}: utility {lie} > truthful {honest}")
            });
        }
    }
    let vanilla = SelectionRule::new(MechanismKind::VanillaGreedy, cfg.epsilon);
    for &i in &vanilla.select(&inst)?.selected {
        let p = critical_value_closed_form(&inst, i)?;
        let u = p.charged(DEFAULT_ESSENTIAL_SURROGATE) - inst.reported_costs[i];
        out.check(6, u >= 0.0, || format!("vanilla client {i}: utility {u}"));
    }

    // bisection against a grid scan
    for &i in &tis.selected {
        let b = critical_value_bisection(&inst, i, &rule, cfg.gamma)?;
        if let Payment::Finite(p) = b.payment {
            let scan = grid_scan_threshold(&inst, i, &rule, b.upper, cfg.gamma * 1e-3)?;
            out.check(7, (p - scan).abs() <= cfg.gamma, || {
                format!("client {i}: bisection {p} vs grid {scan}")
            });
            let bound = (b.upper / cfg.gamma).log2().ceil().max(0.0) as usize;
            out.check(7, b.probes <= bound, || {
                format!("client {i}: {} probes > bound {bound}", b.probes)
            });
        }
    }
    Ok((inst, out))
}

pub fn run_oracle_suite(cfg: &OracleConfig) -> Result<OracleReport> {
    run_oracle_suite_with(cfg, &greedy_under_budget)
}

pub fn run_oracle_suite_with(cfg: &OracleConfig, greedy: &GreedyFn) -> Result<OracleReport> {
    cfg.validate()?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, t, greedy))
        .collect::<Result<Vec<_>>>()?;
    let mut properties: Vec<PropertyReport> = ORACLE_PROPERTIES
        .iter()
        .map(|name| PropertyReport {
            name: name.to_string(),
            checks: 0,
            failures: 0,
            counterexamples: Vec::new(),
        })
        .collect();
    for (trial, (inst, outcome)) in trials.into_iter().enumerate() {
        for (p, n) in outcome.checks.iter().enumerate() {
            properties[p].checks += n;
        }
        for (p, detail) in outcome.failures {
            let prop = &mut properties[p];
            prop.failures += 1;
            if prop.counterexamples.len() < MAX_COUNTEREXAMPLES {
                prop.counterexamples.push(Counterexample {
                    trial,
                    detail,
                    instance: inst.clone(),
                });
            }
        }
    }
    Ok(OracleReport {
        config: *cfg,
        properties,
    })
}

// ---------------------------------------------------------------------------
// output files

pub fn write_run_csv<W: Write>(out: W, metrics: &RunMetrics) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "metric", "value"])?;
    let steps = metrics.cumulative_regret.len();
    for t in 0..steps {
        for name in RunMetrics::SERIES {
            let v = metrics.series(name).map_or(0.0, |s| s[t]);
            w.serialize((t + 1, name, v))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(out: W, aggregates: &[&Aggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "variant", "metric", "mean", "std"])?;
    for a in aggregates {
        for t in 0..a.steps {
            for (name, s) in &a.series {
                w.serialize((t + 1, &a.variant, name, s.mean[t], s.std[t]))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn write_seed_files(dir: &Path, runs: &[SeedRun]) -> Result<()> {
    for r in runs {
        let mut f = create(&dir.join(format!("seed_{}.csv", r.seed)))?;
        write_run_csv(&mut f, &r.metrics)?;
        f.flush()?;
        if !r.rounds.is_empty() {
            let mut f = create(&dir.join(format!("seed_{}_rounds.jsonl", r.seed)))?;
            write_round_log(&mut f, &r.rounds)?;
            f.flush()?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VariantSummary<'a> {
    variant: &'a str,
    seeds: &'a [u64],
    rounds_mean: f64,
    rounds_std: f64,
    final_mean: BTreeMap<&'a str, f64>,
    final_std: BTreeMap<&'a str, f64>,
}

fn summary(a: &Aggregate) -> VariantSummary<'_> {
    VariantSummary {
        variant: &a.variant,
        seeds: &a.seeds,
        rounds_mean: a.rounds_mean,
        rounds_std: a.rounds_std,
        final_mean: RunMetrics::SERIES.iter().map(|m| (*m, a.final_mean(m))).collect(),
        final_std: RunMetrics::SERIES.iter().map(|m| (*m, a.final_std(m))).collect(),
    }
}

fn write_plots(dir: &Path, aggregates: &[&Aggregate]) -> Result<()> {
    for metric in RunMetrics::SERIES {
        let lines: Vec<(&str, &[f64])> = aggregates
            .iter()
            .filter_map(|a| a.series.get(metric).map(|s| (a.variant.as_str(), s.mean.as_slice())))
            .collect();
        let mut f = create(&dir.join("plots").join(format!("{metric}.svg")))?;
        f.write_all(render_line_chart(metric, &lines).as_bytes())?;
        f.flush()?;
    }
    Ok(())
}

pub fn write_comparison(dir: &Path, variants: &[VariantRuns]) -> Result<()> {
    for v in variants {
        write_seed_files(&dir.join(&v.variant), &v.runs)?;
    }
    let aggs: Vec<&Aggregate> = variants.iter().map(|v| &v.aggregate).collect();
    let mut f = create(&dir.join("aggregate.csv"))?;
    write_aggregate_csv(&mut f, &aggs)?;
    f.flush()?;
    let summaries: Vec<_> = aggs.iter().map(|a| summary(a)).collect();
    write_json(&dir.join("summary.json"), &summaries)?;
    write_plots(dir, &aggs)
}

pub fn write_micro(dir: &Path, table: &MicroTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join("micro.csv"))?);
    for r in &table.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&dir.join("micro.json"), table)
}

#[derive(Serialize)]
struct MacroRow<'a> {
    direction: &'a str,
    ratio: f64,
    metric: &'a str,
    mean: f64,
    std: f64,
}

pub fn write_macro(dir: &Path, grid: &MacroGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(&dir.join("macro.csv"))?);
    for c in &grid.cells {
        for m in RunMetrics::SERIES {
            w.serialize(MacroRow {
                direction: c.direction.name(),
                ratio: c.ratio,
                metric: m,
                mean: c.aggregate.final_mean(m),
                std: c.aggregate.final_std(m),
            })?;
        }
        let mut f = create(&dir.join("cells").join(format!("{}.csv", c.label())))?;
        write_aggregate_csv(&mut f, &[&c.aggregate])?;
        f.flush()?;
    }
    w.flush()?;
    let aggs: Vec<&Aggregate> = grid.cells.iter().map(|c| &c.aggregate).collect();
    write_plots(dir, &aggs)
}

pub fn write_oracle_report(dir: &Path, report: &OracleReport) -> Result<()> {
    write_json(&dir.join("oracle_report.json"), report)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal SVG line chart; at most 400 points per line.
pub fn render_line_chart(title: &str, lines: &[(&str, &[f64])]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let steps = lines.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0);
    let y_max = lines
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let x_of = |t: usize| pad + (w - 2.0 * pad) * t as f64 / steps.max(2).saturating_sub(1) as f64;
    let y_of = |v: f64| h - pad - (h - 2.0 * pad) * v / y_max;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        w / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{y_max:.4}</text>"#,
        4.0,
        pad + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">step {steps}</text>"#,
        w - pad,
        h - pad + 16.0
    );
    for (k, (name, ys)) in lines.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let stride = ys.len().div_ceil(400).max(1);
        let mut pts = String::new();
        for t in (0..ys.len()).step_by(stride).chain(ys.len().checked_sub(1)) {
            let _ = write!(pts, "{:.2},{:.2} ", x_of(t), y_of(ys[t]));
        }
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{colour}">{name}</text>"#,
            pad + 10.0,
            pad + 16.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}
