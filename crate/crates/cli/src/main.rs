//! `truthfed` command-line tool.
//!
//! Settings are resolved as built-in defaults, then the `--config` file, then
//! flags. Exit status: 0 on success, 1 on any configuration or I/O error,
//! 2 when the oracle suite finds a failing property.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use truthfed_core::experiments::{
    run_comparison, run_macro_study, run_micro_study, run_oracle_suite, with_worker_pool,
    write_comparison, write_macro, write_micro, write_oracle_report, DcSetting, ExperimentConfig,
    OracleConfig, MACRO_RATIOS,
};
use truthfed_core::payments::monopoly_free_beta_bound;
use truthfed_core::protocol::default_dc;
use truthfed_core::strategies::Direction;
use truthfed_core::{Error, MechanismKind, ReportingStrategy};

#[derive(Parser)]
#[command(name = "truthfed", version, about = "Incentivized federated linear bandit experiments")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mechanism over all seeds.
    Run(RunArgs),
    /// Run several mechanisms on the same seeds.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated mechanisms.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "truth_fedban,vanilla_greedy,ordered_budget,select_all"
        )]
        mechanisms: Vec<MechanismKind>,
    },
    /// One designated client misreports by each factor in turn.
    Micro {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,2,10")]
        factors: Vec<f64>,
    },
    /// Population-level misreporting grid.
    Macro {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 2.0)]
        factor: f64,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Randomized property checks on small instances.
    Oracle(OracleArgs),
    /// Print the default communication threshold.
    Dc {
        #[arg(long = "T")]
        horizon: u64,
        #[arg(long = "N")]
        num_clients: usize,
        #[arg(long = "d")]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
    },
    /// Print the largest β for which no client can be essential at step t.
    BetaBound {
        #[arg(long)]
        t: f64,
        #[arg(long = "L", default_value_t = 1.0)]
        arm_norm: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long = "d")]
        dim: usize,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory.
    #[arg(long, env = "TRUTHFED_OUT", default_value = "truthfed-out")]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads (all cores by default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
    /// Replaces the seed list; repeat for several seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    mechanism: Option<MechanismKind>,
    #[arg(long = "T")]
    horizon: Option<u64>,
    #[arg(long = "N")]
    num_clients: Option<usize>,
    #[arg(long = "d")]
    dim: Option<usize>,
    #[arg(long = "K")]
    arms_per_step: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// A number, or "auto".
    #[arg(long)]
    dc: Option<String>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    max_clients: usize,
    #[arg(long, default_value_t = 3)]
    max_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-6)]
    gamma: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(m) = self.mechanism {
            cfg.mechanism = m;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.num_clients {
            cfg.num_clients = v;
        }
        if let Some(v) = self.dim {
            cfg.dim = v;
        }
        if let Some(v) = self.arms_per_step {
            cfg.arms_per_step = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(dc) = &self.dc {
            cfg.d_c = match dc.as_str() {
                "auto" => DcSetting::Auto,
                s => DcSetting::Value(s.parse().map_err(|_| Error::ConfigInvalid {
                    field: "d_c".into(),
                    reason: format!("expected a number or \"auto\", got \"{s}\""),
                })?),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
fn prepare_output(out: &OutputArgs) -> Result<&Path, Error> {
    let dir = out.out.as_path();
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !out.force {
            return Err(Error::ConfigInvalid {
                field: "out".into(),
                reason: format!(
                    "{} already has files; pass --force to overwrite",
                    dir.display()
                ),
            });
        }
    }
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn log(verbose: u8, msg: impl FnOnce() -> String) {
    if verbose > 0 {
        eprintln!("{}", msg());
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    let v = cli.verbose;
    match cli.command {
        Command::Run(run) => {
            let cfg = run.resolve()?;
            let dir = prepare_output(&run.output)?;
            log(v, || format!("running {} over seeds {:?}", cfg.mechanism, cfg.seeds));
            let out = with_worker_pool(run.output.threads, || run_comparison(&cfg, &[cfg.mechanism]))??;
            write_comparison(dir, &out)?;
            for var in &out {
                print_summary(&var.aggregate);
            }
        }
        Command::Compare { run, mechanisms } => {
            let cfg = run.resolve()?;
            let dir = prepare_output(&run.output)?;
            log(v, || format!("comparing {mechanisms:?} over seeds {:?}", cfg.seeds));
            let out = with_worker_pool(run.output.threads, || run_comparison(&cfg, &mechanisms))??;
            write_comparison(dir, &out)?;
            for var in &out {
                print_summary(&var.aggregate);
            }
        }
        Command::Micro {
            run,
            client,
            factors,
        } => {
            let cfg = run.resolve()?;
            let dir = prepare_output(&run.output)?;
            let grid: Vec<ReportingStrategy> =
                factors.iter().map(|&f| ReportingStrategy::multiplicative(f)).collect();
            log(v, || format!("micro study for client {client}, factors {factors:?}"));
            let table = with_worker_pool(run.output.threads, || run_micro_study(&cfg, client, &grid))??;
            write_micro(dir, &table)?;
            println!("strategy\tregret\tincentive\tutility\tnorm_utility");
            for r in &table.rows {
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    r.strategy, r.regret, r.incentive, r.utility, r.normalized_utility
                );
            }
        }
        Command::Macro { run, factor, ratios } => {
            let cfg = run.resolve()?;
            let dir = prepare_output(&run.output)?;
            let ratios = ratios.unwrap_or_else(|| MACRO_RATIOS.to_vec());
            log(v, || format!("macro grid, ratios {ratios:?}, factor {factor}"));
            let grid = with_worker_pool(run.output.threads, || {
                run_macro_study(&cfg, &ratios, &[Direction::Under, Direction::Over], factor)
            })??;
            write_macro(dir, &grid)?;
            for c in &grid.cells {
                print_summary(&c.aggregate);
            }
        }
        Command::Oracle(args) => {
            let dir = prepare_output(&args.output)?;
            let cfg = OracleConfig {
                trials: args.trials,
                max_clients: args.max_clients,
                max_dim: args.max_dim,
                epsilon: args.epsilon,
                gamma: args.gamma,
                seed: args.seed,
            };
            let report = with_worker_pool(args.output.threads, || run_oracle_suite(&cfg))??;
            write_oracle_report(dir, &report)?;
            for p in &report.properties {
                println!(
                    "{:<24} {} {}/{} failed",
                    p.name,
                    if p.passed() { "PASS" } else { "FAIL" },
                    p.failures,
                    p.checks
                );
            }
            if !report.passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Dc {
            horizon,
            num_clients,
            dim,
            lambda,
            beta,
        } => {
            if horizon < 3 {
                return Err(Error::ConfigInvalid {
                    field: "T".into(),
                    reason: "must be at least 3".into(),
                });
            }
            println!("{}", default_dc(horizon, num_clients, dim, lambda, beta));
        }
        Command::BetaBound {
            t,
            arm_norm,
            lambda,
            dim,
        } => {
            println!("{}", monopoly_free_beta_bound(t, arm_norm, lambda, dim));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(a: &truthfed_core::experiments::Aggregate) {
    println!(
        "{:<16} regret {:>10.3}  comm {:>12.0}  incentive {:>12.2}  social {:>12.2}  rounds {:>8.1}",
        a.variant,
        a.final_mean("cumulative_regret"),
        a.final_mean("communication_cost"),
        a.final_mean("incentive_cost"),
        a.final_mean("social_cost"),
        a.rounds_mean
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
