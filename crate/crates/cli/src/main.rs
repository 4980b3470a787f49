use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dapo_core::checks::{run_suite, write_reports_csv, CheckConfig, Suite};
use dapo_core::critic::{
    critic_accuracy, mc_estimate, read_targets_csv, train_critic, write_targets_csv, CriticConfig, CriticTable,
    McTarget,
};
use dapo_core::dapo::{
    build_advantage_dataset, solve_exact_policy, train_policy, ActionMode, AdvantageDataset, Batching, DatasetConfig,
    StateWeighting, SuccessorValues, TrainConfig,
};
use dapo_core::generator::{gen_random_mdp, GenParams};
use dapo_core::harness::{report, run_pipeline, ExperimentConfig, MdpSource, ReferenceSource};
use dapo_core::rng::derive_key;
use dapo_core::values::{evaluate, solve_optimal};
use dapo_core::{Error, MdpFile, StateId, StepMdp, TabularPolicy};

#[derive(Parser)]
#[command(name = "dapo", version, about = "Exact advantage policy optimization on step-level MDPs")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an MDP file and list every violation.
    Validate { mdp: PathBuf },
    /// Generate a random layered DAG MDP.
    GenMdp(GenArgs),
    /// Exact values of a policy, or the regularized optimum.
    Values(ValuesArgs),
    /// Monte-Carlo targets and tabular critics.
    #[command(subcommand)]
    Critic(CriticCommand),
    /// Advantage datasets, policy fitting and iteration.
    #[command(subcommand)]
    Dapo(DapoCommand),
    /// Run the randomized certification suite.
    Verify(VerifyArgs),
    /// Summarize a run directory.
    Report { run_dir: PathBuf },
    /// Run the full pipeline described by --config.
    Run,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    branching: usize,
    #[arg(long)]
    width_cap: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    reward_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    early_terminal_prob: f64,
    #[arg(long, default_value_t = 100_000)]
    state_cap: usize,
}

#[derive(Args)]
struct PolicyArgs {
    /// Reference policy CSV; uniform when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct ValuesArgs {
    mdp: PathBuf,
    /// Policy CSV to evaluate; the reference when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[command(flatten)]
    reference: PolicyArgs,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Solve for the regularized optimum and evaluate it.
    #[arg(long)]
    optimal: bool,
    /// With --optimal, also write the optimal policy here.
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CriticCommand {
    /// Monte-Carlo completion targets.
    Estimate {
        mdp: PathBuf,
        /// Completer policy CSV; uniform when omitted.
        #[arg(long)]
        completer: Option<PathBuf>,
        /// State names; every nonterminal state when omitted.
        #[arg(long, value_delimiter = ',')]
        states: Vec<String>,
        #[arg(long, default_value_t = 4096)]
        n: u64,
    },
    /// Fit a tabular critic to targets.
    Train {
        mdp: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-6)]
        clamp_epsilon: f64,
    },
    /// Compare critic predictions with exact values of the completer.
    Accuracy {
        mdp: PathBuf,
        #[arg(long)]
        critic: PathBuf,
        #[arg(long)]
        completer: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Exact,
    Critic,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchingArg {
    Full,
    StateWise,
    Shuffled,
}

#[derive(Subcommand)]
enum DapoCommand {
    /// Build an advantage dataset.
    Build {
        mdp: PathBuf,
        #[command(flatten)]
        reference: PolicyArgs,
        #[arg(long, value_enum, default_value = "exact")]
        source: SourceArg,
        /// Critic CSV, required with --source critic.
        #[arg(long)]
        critic: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 0.1)]
        gap_threshold: f64,
        /// Use every action once instead of sampling.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        no_dedup: bool,
        /// Training state names; every reachable nonterminal state when omitted.
        #[arg(long, value_delimiter = ',')]
        states: Vec<String>,
    },
    /// Fit a policy to a dataset.
    Train {
        mdp: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        reference: PolicyArgs,
        /// Initial policy; the reference when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 200_000)]
        max_steps: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, value_enum, default_value = "full")]
        batching: BatchingArg,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Solve the per-state KKT system of the dataset exactly.
    SolveExact {
        mdp: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        reference: PolicyArgs,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        policy_out: Option<PathBuf>,
    },
    /// Iterate the pipeline, feeding each output back as the reference.
    Iterate {
        mdp: PathBuf,
        #[command(flatten)]
        reference: PolicyArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

fn output(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn open(path: &Path) -> anyhow::Result<File> {
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

fn load_policy(mdp: &StepMdp, path: &Option<PathBuf>, tag: &str) -> anyhow::Result<TabularPolicy> {
    Ok(match path {
        Some(p) => TabularPolicy::read_csv(mdp, open(p)?)?.with_tag(tag),
        None => TabularPolicy::uniform(mdp),
    })
}

fn state_list(mdp: &StepMdp, names: &[String]) -> anyhow::Result<Vec<StateId>> {
    if names.is_empty() {
        return Ok(mdp.reachable().into_iter().filter(|&s| !mdp.is_terminal(s)).collect());
    }
    Ok(names.iter().map(|n| mdp.state_by_name(n)).collect::<Result<_, _>>()?)
}

fn experiment_config(cli: &Cli) -> anyhow::Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(Some(cfg))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Validate { mdp } => {
            let file = MdpFile::load(mdp)?;
            let report = file.validate();
            if report.is_valid() {
                println!("valid: {} states", file.states.len());
            } else {
                return Err(Error::InvalidMdp(report).into());
            }
        }
        Command::GenMdp(g) => {
            let params = GenParams {
                depth: g.depth,
                branching: g.branching,
                width_cap: g.width_cap,
                reward_prob: g.reward_prob,
                early_terminal_prob: g.early_terminal_prob,
                state_cap: g.state_cap,
            };
            let file = gen_random_mdp(&params, cli.seed)?;
            let mut w = output(&cli.out)?;
            writeln!(w, "{}", file.to_json()?)?;
        }
        Command::Values(v) => {
            let mdp = StepMdp::load(&v.mdp)?;
            let reference = load_policy(&mdp, &v.reference.reference, "reference")?;
            let table = if v.optimal {
                let sol = solve_optimal(&mdp, &reference, v.beta)?;
                if let Some(p) = &v.policy_out {
                    sol.pi_star.write_csv(&mdp, File::create(p)?)?;
                }
                evaluate(&mdp, &sol.pi_star, &reference, v.beta)?
            } else {
                let pi = match &v.policy {
                    Some(_) => load_policy(&mdp, &v.policy, "policy")?,
                    None => reference.clone(),
                };
                evaluate(&mdp, &pi, &reference, v.beta)?
            };
            table.write_csv(&mdp, output(&cli.out)?)?;
        }
        Command::Critic(c) => critic(cli, c)?,
        Command::Dapo(d) => dapo(cli, d)?,
        Command::Verify(v) => {
            let suite: Suite = v.suite.parse()?;
            let reports = run_suite(suite, &CheckConfig::with_instances(v.instances, cli.seed))?;
            for r in &reports {
                println!("{r}");
            }
            if let Some(p) = &cli.out {
                write_reports_csv(&reports, output(&Some(p.clone()))?)?;
            }
            if !reports.iter().all(|r| r.passed) {
                return Err(anyhow::Error::msg("one or more checks failed").context(CheckFailedMarker));
            }
        }
        Command::Report { run_dir } => {
            let rep = report(run_dir)?;
            print!("{}", rep.to_table());
            let out = cli.out.clone().unwrap_or_else(|| run_dir.join("report.csv"));
            rep.write_csv(output(&Some(out))?)?;
            match rep.exit_code() {
                0 => {}
                1 => return Err(anyhow::Error::msg("run has failed checks or value decreases").context(CheckFailedMarker)),
                _ => bail!(Error::Config("run directory is missing or has altered artifacts".into())),
            }
        }
        Command::Run => {
            let Some(cfg) = experiment_config(cli)? else {
                bail!(Error::Config("run requires --config".into()));
            };
            let out = cli
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
            let manifest = run_pipeline(&cfg, &out).map_err(|e| {
                eprintln!("config:\n{}", cfg.to_json().unwrap_or_default());
                e
            })?;
            for a in &manifest.artifacts {
                println!("{}  {}", a.sha256, a.path);
            }
        }
    }
    Ok(())
}

/// Marks errors that mean "ran fine, but a check failed" (exit status 1).
#[derive(Debug)]
struct CheckFailedMarker;

impl std::fmt::Display for CheckFailedMarker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("check failed")
    }
}

fn critic(cli: &Cli, cmd: &CriticCommand) -> anyhow::Result<()> {
    match cmd {
        CriticCommand::Estimate { mdp, completer, states, n } => {
            let mdp = StepMdp::load(mdp)?;
            let completer = load_policy(&mdp, completer, "completer")?;
            let states: Vec<StateId> = if states.is_empty() {
                mdp.nonterminal_states().collect()
            } else {
                state_list(&mdp, states)?
            };
            let targets: Vec<McTarget> = states
                .iter()
                .map(|&s| mc_estimate(&mdp, &completer, s, *n, derive_key(cli.seed, s.0 as u64)))
                .collect::<Result<_, _>>()?;
            write_targets_csv(&mdp, &targets, output(&cli.out)?)?;
        }
        CriticCommand::Train { mdp, targets, epochs, clamp_epsilon } => {
            let mdp = StepMdp::load(mdp)?;
            let targets = read_targets_csv(&mdp, open(targets)?)?;
            let cfg = CriticConfig { epochs: *epochs, clamp_epsilon: *clamp_epsilon, ..CriticConfig::default() };
            let critic = train_critic(&targets, &cfg)?;
            if !critic.converged {
                eprintln!("warning: critic stopped after {} epochs without converging", critic.epochs_run);
            }
            critic.write_csv(&mdp, output(&cli.out)?)?;
        }
        CriticCommand::Accuracy { mdp, critic, completer } => {
            let mdp = StepMdp::load(mdp)?;
            let completer = load_policy(&mdp, completer, "completer")?;
            let critic = CriticTable::read_csv(&mdp, open(critic)?, CriticConfig::default())?;
            let exact = evaluate(&mdp, &completer, &completer, 0.0)?;
            let rep = critic_accuracy(&mdp, &critic, &exact);
            let mut w = output(&cli.out)?;
            writeln!(w, "state,abs_error")?;
            for (s, e) in &rep.per_state {
                writeln!(w, "{},{e:?}", mdp.name(*s))?;
            }
            eprintln!(
                "max abs error {:.6}, mean abs error {:.6}, uncovered states {}",
                rep.max_abs_error,
                rep.mean_abs_error,
                rep.uncovered.len()
            );
        }
    }
    Ok(())
}

fn dapo(cli: &Cli, cmd: &DapoCommand) -> anyhow::Result<()> {
    match cmd {
        DapoCommand::Build {
            mdp,
            reference,
            source,
            critic,
            beta,
            m,
            gap_threshold,
            full,
            no_dedup,
            states,
        } => {
            let mdp = StepMdp::load(mdp)?;
            let reference = load_policy(&mdp, &reference.reference, "reference")?;
            let states: Vec<(StateId, f64)> = state_list(&mdp, states)?.into_iter().map(|s| (s, 1.0)).collect();
            let cfg = DatasetConfig {
                actions: if *full { ActionMode::Full } else { ActionMode::Sampled },
                m: *m,
                gap_threshold: *gap_threshold,
                dedup: !no_dedup,
                state_weighting: StateWeighting::Visits,
            };
            let exact;
            let table;
            let values = match source {
                SourceArg::Exact => {
                    exact = evaluate(&mdp, &reference, &reference, 0.0)?;
                    SuccessorValues::Exact(&exact)
                }
                SourceArg::Critic => {
                    let Some(path) = critic else {
                        bail!(Error::Config("--source critic requires --critic".into()));
                    };
                    table = CriticTable::read_csv(&mdp, open(path)?, CriticConfig::default())?;
                    SuccessorValues::Critic(&table)
                }
            };
            let ds = build_advantage_dataset(&mdp, &states, &reference, values, *beta, &cfg, cli.seed)?;
            eprintln!("{} records over {} states, {} dropped", ds.records.len(), ds.states().len(), ds.dropped.len());
            ds.write_csv(&mdp, output(&cli.out)?)?;
        }
        DapoCommand::Train {
            mdp,
            dataset,
            reference,
            init,
            beta,
            lr,
            max_steps,
            tol,
            batching,
            batch_size,
        } => {
            let mdp = StepMdp::load(mdp)?;
            let reference = load_policy(&mdp, &reference.reference, "reference")?;
            let init = match init {
                Some(_) => load_policy(&mdp, init, "policy")?,
                None => reference.clone(),
            };
            let ds = AdvantageDataset::read_csv(&mdp, open(dataset)?, *beta)?;
            let cfg = TrainConfig {
                lr: *lr,
                max_steps: *max_steps,
                tol: *tol,
                batching: match batching {
                    BatchingArg::Full => Batching::Full,
                    BatchingArg::StateWise => Batching::StateWise,
                    BatchingArg::Shuffled => Batching::Shuffled,
                },
                batch_size: *batch_size,
                seed: cli.seed,
            };
            let trained = train_policy(&mdp, &ds, &reference, &init, &cfg)?;
            eprintln!(
                "{} steps, loss {:.6e}, grad norm {:.3e}, converged {}",
                trained.steps, trained.loss, trained.grad_norm, trained.converged
            );
            trained.policy.write_csv(&mdp, output(&cli.out)?)?;
        }
        DapoCommand::SolveExact { mdp, dataset, reference, beta, policy_out } => {
            let mdp = StepMdp::load(mdp)?;
            let reference = load_policy(&mdp, &reference.reference, "reference")?;
            let ds = AdvantageDataset::read_csv(&mdp, open(dataset)?, *beta)?;
            let sol = solve_exact_policy(&mdp, &ds, &reference)?;
            let (n, s) = sol.max_residuals();
            eprintln!("normalization residual {n:.2e}, stationarity residual {s:.2e}");
            sol.write_csv(&mdp, output(&cli.out)?)?;
            if let Some(p) = policy_out {
                sol.pi_plus.write_csv(&mdp, File::create(p)?)?;
            }
        }
        DapoCommand::Iterate { mdp, reference, iterations, beta, source } => {
            let mut cfg = experiment_config(cli)?.unwrap_or_else(ExperimentConfig::builtin_t2);
            cfg.mdp = MdpSource::File { path: mdp.clone() };
            if let Some(r) = &reference.reference {
                cfg.reference = ReferenceSource::File { path: r.clone() };
            }
            if let Some(k) = iterations {
                cfg.pipeline.iterations = *k;
            }
            if let Some(b) = beta {
                cfg.pipeline.beta = *b;
            }
            if let Some(s) = source {
                cfg.pipeline.source = match s {
                    SourceArg::Exact => dapo_core::dapo::AdvantageSource::Exact,
                    SourceArg::Critic => dapo_core::dapo::AdvantageSource::Critic,
                };
            }
            if cli.config.is_none() {
                cfg.master_seed = cli.seed;
            }
            let out = cli
                .out
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
            run_pipeline(&cfg, &out)?;
            let rep = report(&out)?;
            print!("{}", rep.to_table());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailedMarker>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<Error>() {
        return if e.is_input_error() { 2 } else { 1 };
    }
    if err.downcast_ref::<io::Error>().is_some() {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
