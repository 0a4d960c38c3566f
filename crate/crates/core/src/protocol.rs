//! Incentivized synchronization for federated LinUCB.
//!
//! Each step one client arrives, plays LinUCB on its local statistics, and
//! checks its determinant-ratio trigger. When the trigger fires a round runs:
//!
//! 1. every client uploads `ΔV_i` (`N·d²` scalars),
//! 2. every client posts a cost report derived from `w·det(ΔV_i) + C_i`,
//! 3. the server picks participants and prices them,
//! 4. participants upload `Δb_i` (`|S|·d` scalars) and clear their deltas,
//! 5. every client downloads the other participants' updates
//!    (`N·(d² + d)` scalars).
//!
//! Cost reports and payments (`N + |S|` scalars) are tallied separately in
//! `control_scalars` and are not part of the communication cost.
//!
//! Between rounds `V_i = V_g + ΔV_i` holds for every client, and
//! `V_g + Σ ΔV_i` is the Gram matrix of every pull so far.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::env::{select_arm_ucb, stream_rng, Environment, Stream};
use crate::error::{Error, Result};
use crate::linalg::{log_det, RealVector, SufficientStats};
use crate::mechanism::{CoverageInstance, MechanismKind, SelectionResult, SelectionRule};
use crate::payments::{settle_round, PaymentSchedule};
use crate::strategies::{make_report, ReportingStrategy, UtilityLedger};
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Client `(t − 1) mod N` acts at step `t`.
    #[default]
    RoundRobin,
    /// Uniform draw per step from the arrival stream.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: ClientId,
    /// `V_i`, `b_i`
    pub stats: SufficientStats,
    /// `ΔV_i`, `Δb_i`
    pub delta: SufficientStats,
    pub delta_t: u64,
    pub cost_weight: f64,
    pub intrinsic_cost: f64,
    pub strategy: ReportingStrategy,
}

impl ClientState {
    pub fn new(
        id: ClientId,
        dim: usize,
        cost_weight: f64,
        intrinsic_cost: f64,
        strategy: ReportingStrategy,
    ) -> Self {
        ClientState {
            id,
            stats: SufficientStats::zeros(dim),
            delta: SufficientStats::zeros(dim),
            delta_t: 0,
            cost_weight,
            intrinsic_cost,
            strategy,
        }
    }

    /// `w·det(ΔV_i) + C_i`, determinant without ridge.
    pub fn true_cost(&self) -> f64 {
        self.cost_weight * self.delta.v.raw_det() + self.intrinsic_cost
    }
}

pub fn local_step(client: &mut ClientState, arm: &RealVector, reward: f64) -> Result<()> {
    client.stats.observe(arm, reward)?;
    client.delta.observe(arm, reward)?;
    client.delta_t += 1;
    Ok(())
}

/// `Δt·(log det(V_i + λI) − log det(V_i − ΔV_i + λI)) > D_c`
pub fn trigger_fired(client: &ClientState, ridge: f64, d_c: f64) -> Result<bool> {
    if client.delta.v.is_zero() {
        return Ok(false);
    }
    let before = client.stats.v.sub(&client.delta.v)?;
    let ratio = log_det(&client.stats.v, ridge)? - log_det(&before, ridge)?;
    Ok(client.delta_t as f64 * ratio > d_c)
}

/// `R = ⌈d·ln(1 + T/(λd))⌉`
pub fn doubling_rounds(horizon: u64, dim: usize, ridge: f64) -> f64 {
    let d = dim as f64;
    (d * (horizon as f64 / (ridge * d)).ln_1p()).ceil()
}

/// Communication threshold
/// `T/(N²d ln T) − sqrt(T²/(N²dR ln T))·ln β^{1−e⁻¹}`.
pub fn default_dc(horizon: u64, num_clients: usize, dim: usize, ridge: f64, beta: f64) -> f64 {
    let t = horizon as f64;
    let n2d = (num_clients * num_clients * dim) as f64;
    let log_t = t.ln();
    let r = doubling_rounds(horizon, dim, ridge);
    let relaxed_log_beta = (1.0 - (-1.0f64).exp()) * beta.ln();
    t / (n2d * log_t) - (t * t / (n2d * r * log_t)).sqrt() * relaxed_log_beta
}

/// Scalars moved by one round with `selected` participants.
pub fn round_scalars(num_clients: usize, dim: usize, selected: usize) -> (u64, u64) {
    let (n, d, s) = (num_clients as u64, dim as u64, selected as u64);
    (n * d * d + s * d, n * (d * d + d))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerTotals {
    pub incentive_cost: f64,
    pub social_cost: f64,
    pub scalars_transferred: u64,
    pub control_scalars: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// `V_g`, `b_g`
    pub stats: SufficientStats,
    pub totals: ServerTotals,
}

impl ServerState {
    pub fn new(dim: usize) -> Self {
        ServerState {
            stats: SufficientStats::zeros(dim),
            totals: ServerTotals::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub trigger_step: u64,
    pub trigger_client: ClientId,
    pub true_costs: Vec<f64>,
    pub reports: Vec<f64>,
    pub selection: SelectionResult,
    pub payments: PaymentSchedule,
    pub scalars_up: u64,
    pub scalars_down: u64,
    pub control_scalars: u64,
    pub social_cost_increment: f64,
    pub incentive_increment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundParams {
    pub rule: SelectionRule,
    pub beta: f64,
    pub ridge: f64,
    pub gamma: f64,
    pub essential_surrogate: f64,
}

/// Runs one round. Nothing is mutated unless every stage succeeds.
pub fn run_communication_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    params: &RoundParams,
    trigger_step: u64,
    trigger_client: ClientId,
    ledger: &mut UtilityLedger,
) -> Result<RoundRecord> {
    let n = clients.len();
    let dim = server.stats.dim();
    let true_costs: Vec<f64> = clients.iter().map(ClientState::true_cost).collect();
    let reports = clients
        .iter()
        .zip(&true_costs)
        .map(|(c, &cost)| make_report(&c.strategy, cost, trigger_step))
        .collect::<Result<Vec<_>>>()?;
    let inst = CoverageInstance::new(
        server.stats.v.clone(),
        clients.iter().map(|c| c.delta.v.clone()).collect(),
        reports.clone(),
        params.beta,
        params.ridge,
    )?;
    let selection = params.rule.select(&inst)?;
    let payments = settle_round(
        &selection,
        &inst,
        &params.rule,
        params.gamma,
        params.essential_surrogate,
    )?;

    // commit
    let (scalars_up, scalars_down) = round_scalars(n, dim, selection.selected.len());
    let mut participating = vec![false; n];
    for &i in &selection.selected {
        participating[i] = true;
        server.stats.add_assign(&clients[i].delta)?;
    }
    let mut social = 0.0;
    for c in clients.iter_mut() {
        if participating[c.id] {
            social += true_costs[c.id];
            ledger.record_participation(c.id, payments.charged(c.id), true_costs[c.id]);
            c.delta.set_zero();
            c.delta_t = 0;
        }
        // merging the others' updates leaves V_i = V_g + ΔV_i
        c.stats = server.stats.clone();
        c.stats.add_assign(&c.delta)?;
    }
    let incentive = payments.total_incentive();
    let control = (n + selection.selected.len()) as u64;
    let t = &mut server.totals;
    t.incentive_cost += incentive;
    t.social_cost += social;
    t.scalars_transferred += scalars_up + scalars_down;
    t.control_scalars += control;
    t.rounds += 1;
    Ok(RoundRecord {
        trigger_step,
        trigger_client,
        true_costs,
        reports,
        selection,
        payments,
        scalars_up,
        scalars_down,
        control_scalars: control,
        social_cost_increment: social,
        incentive_increment: incentive,
    })
}

/// Everything one seeded run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub horizon: u64,
    pub num_clients: usize,
    pub dim: usize,
    pub arms_per_step: usize,
    pub noise_sigma: f64,
    pub arm_norm_bound: f64,
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub cost_weight: f64,
    pub intrinsic_cost_low: f64,
    pub intrinsic_cost_high: f64,
    pub d_c: f64,
    pub mechanism: MechanismKind,
    pub strategies: Vec<ReportingStrategy>,
    pub essential_surrogate: f64,
    pub arrival: Arrival,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.arms_per_step == 0 {
            return Err(Error::config("arms_per_step", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        positive("arm_norm_bound", self.arm_norm_bound)?;
        positive("lambda", self.lambda)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1]"));
        }
        positive("epsilon", self.epsilon)?;
        positive("gamma", self.gamma)?;
        if !(self.cost_weight >= 0.0) {
            return Err(Error::config("cost_weight", "must be non-negative"));
        }
        if !(self.intrinsic_cost_low >= 0.0 && self.intrinsic_cost_high > self.intrinsic_cost_low)
        {
            return Err(Error::config(
                "intrinsic_cost_high",
                "intrinsic cost range must satisfy 0 <= low < high",
            ));
        }
        if !(self.d_c >= 0.0) {
            return Err(Error::config("d_c", "must be non-negative"));
        }
        positive("essential_surrogate", self.essential_surrogate)?;
        if self.strategies.len() != self.num_clients {
            return Err(Error::config(
                "strategies",
                format!(
                    "expected {} entries, found {}",
                    self.num_clients,
                    self.strategies.len()
                ),
            ));
        }
        Ok(())
    }

    pub fn round_params(&self) -> RoundParams {
        RoundParams {
            rule: SelectionRule::new(self.mechanism, self.epsilon),
            beta: self.beta,
            ridge: self.lambda,
            gamma: self.gamma,
            essential_surrogate: self.essential_surrogate,
        }
    }
}

/// Per-step series and end-of-run totals for one seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cumulative_regret: Vec<f64>,
    pub communication_cost: Vec<f64>,
    pub incentive_cost: Vec<f64>,
    pub social_cost: Vec<f64>,
    pub final_utilities: Vec<f64>,
    pub client_regret: Vec<f64>,
    pub client_incentives: Vec<f64>,
    pub rounds: u64,
    pub control_scalars: u64,
    pub essential_payments: u64,
}

impl RunMetrics {
    pub const SERIES: [&'static str; 4] = [
        "cumulative_regret",
        "communication_cost",
        "incentive_cost",
        "social_cost",
    ];

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        match name {
            "cumulative_regret" => Some(&self.cumulative_regret),
            "communication_cost" => Some(&self.communication_cost),
            "incentive_cost" => Some(&self.incentive_cost),
            "social_cost" => Some(&self.social_cost),
            _ => None,
        }
    }

    pub fn final_value(&self, name: &str) -> f64 {
        self.series(name)
            .and_then(|s| s.last().copied())
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub client: ClientId,
    pub arm: RealVector,
    pub reward: f64,
    pub regret: f64,
    pub round: Option<RoundRecord>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimulationConfig,
    env: Environment,
    clients: Vec<ClientState>,
    server: ServerState,
    ledger: UtilityLedger,
    params: RoundParams,
    t: u64,
    regret: f64,
    metrics: RunMetrics,
}

impl Simulation {
    pub fn new(config: SimulationConfig) -> Result<Self> {
        config.validate()?;
        let env = Environment::new(
            config.dim,
            config.arms_per_step,
            config.noise_sigma,
            config.arm_norm_bound,
            config.seed,
        );
        let mut cost_rng = stream_rng(config.seed, Stream::Costs, 0);
        let clients = (0..config.num_clients)
            .map(|i| {
                let c = loop {
                    let c = cost_rng
                        .random_range(config.intrinsic_cost_low..config.intrinsic_cost_high);
                    if c > config.intrinsic_cost_low {
                        break c;
                    }
                };
                ClientState::new(i, config.dim, config.cost_weight, c, config.strategies[i])
            })
            .collect();
        let n = config.num_clients;
        let cap = config.horizon as usize;
        Ok(Simulation {
            params: config.round_params(),
            server: ServerState::new(config.dim),
            ledger: UtilityLedger::new(n),
            metrics: RunMetrics {
                cumulative_regret: Vec::with_capacity(cap),
                communication_cost: Vec::with_capacity(cap),
                incentive_cost: Vec::with_capacity(cap),
                social_cost: Vec::with_capacity(cap),
                ..RunMetrics::default()
            },
            env,
            clients,
            config,
            t: 0,
            regret: 0.0,
        })
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn ledger(&self) -> &UtilityLedger {
        &self.ledger
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    /// The selection problem a round triggered now would face, with every
    /// client reporting truthfully.
    pub fn pending_instance(&self) -> Result<CoverageInstance> {
        CoverageInstance::new(
            self.server.stats.v.clone(),
            self.clients.iter().map(|c| c.delta.v.clone()).collect(),
            self.clients.iter().map(ClientState::true_cost).collect(),
            self.config.beta,
            self.config.lambda,
        )
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.horizon
    }

    fn arriving_client(&self, t: u64) -> ClientId {
        let n = self.config.num_clients;
        match self.config.arrival {
            Arrival::RoundRobin => ((t - 1) % n as u64) as usize,
            Arrival::Uniform => stream_rng(self.config.seed, Stream::Arrival, t).random_range(0..n),
        }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.t += 1;
        let t = self.t;
        let i = self.arriving_client(t);
        let arms = self.env.generate_arm_set(t);
        let k = select_arm_ucb(
            &self.clients[i].stats,
            &arms,
            self.config.lambda,
            self.config.noise_sigma,
            self.config.delta,
        )?;
        let obs = self.env.observe(&arms, k, t)?;
        local_step(&mut self.clients[i], &obs.chosen_arm, obs.reward)?;
        self.regret += obs.instant_regret;
        self.ledger.record_regret(i, obs.instant_regret);

        let mut round = None;
        if self.config.mechanism != MechanismKind::None
            && trigger_fired(&self.clients[i], self.config.lambda, self.config.d_c)?
        {
            round = Some(run_communication_round(
                &mut self.server,
                &mut self.clients,
                &self.params,
                t,
                i,
                &mut self.ledger,
            )?);
        }
        let totals = &self.server.totals;
        self.metrics.cumulative_regret.push(self.regret);
        self.metrics
            .communication_cost
            .push(totals.scalars_transferred as f64);
        self.metrics.incentive_cost.push(totals.incentive_cost);
        self.metrics.social_cost.push(totals.social_cost);
        if let Some(r) = &round {
            self.metrics.essential_payments += r.payments.essential_count() as u64;
        }
        Ok(StepReport {
            step: t,
            client: i,
            arm: obs.chosen_arm,
            reward: obs.reward,
            regret: obs.instant_regret,
            round,
        })
    }

    pub fn finish(mut self) -> RunMetrics {
        let accounts = self.ledger.accounts();
        self.metrics.final_utilities = accounts.iter().map(|a| a.utility).collect();
        self.metrics.client_regret = accounts.iter().map(|a| a.regret).collect();
        self.metrics.client_incentives = accounts.iter().map(|a| a.incentives).collect();
        self.metrics.rounds = self.server.totals.rounds;
        self.metrics.control_scalars = self.server.totals.control_scalars;
        self.metrics
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub metrics: RunMetrics,
    pub rounds: Vec<RoundRecord>,
}

pub fn run_simulation(config: &SimulationConfig) -> Result<SimulationOutput> {
    let mut sim = Simulation::new(config.clone())?;
    let mut rounds = Vec::new();
    while !sim.is_done() {
        if let Some(r) = sim.step()?.round {
            rounds.push(r);
        }
    }
    Ok(SimulationOutput {
        metrics: sim.finish(),
        rounds,
    })
}

/// One JSON object per line.
pub fn write_round_log<W: std::io::Write>(mut out: W, rounds: &[RoundRecord]) -> Result<()> {
    for r in rounds {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
