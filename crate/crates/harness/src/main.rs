//! `decmarl` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 when `--assert`
//! is given and an acceptance check fails.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decmarl::tabular::StepSizeSchedule;
use decmarl_harness::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentOutput, HarnessError, Method};

#[derive(Debug, Parser)]
#[command(name = "decmarl", version, about = "Decentralized multi-agent actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabular actor-critic on random MDPs.
    TrainTabular(TabularArgs),
    /// Off-policy actor-critic on the cooperative navigation task.
    TrainContinuous(ContinuousArgs),
    /// Neighbor averaging on a communication graph.
    ConsensusDemo(ConsensusArgs),
    /// Critic convergence under frozen policies against the exact oracle.
    VerifyTheorem1(Theorem1Args),
    /// Monotonicity of exact alternating policy improvement.
    VerifyTheorem2(Theorem2Args),
    /// Paired comparison against centralized and Q-learning baselines.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed (shorthand for `--seeds S`).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory, or a `.csv` file for single-curve runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 if any acceptance check fails.
    #[arg(long)]
    assert: bool,
}

#[derive(Debug, Args)]
struct TabularArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mdp_seed: Option<u64>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Critic step-size exponent.
    #[arg(long)]
    omega: Option<f64>,
    /// Actor step size.
    #[arg(long)]
    beta: Option<f64>,
    /// Symmetric logit clip bound.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    episode_length: Option<usize>,
    /// Only agent `t mod N` improves at tick `t`.
    #[arg(long)]
    sequential: bool,
    /// Log the distance to the exact local Q every this many episodes.
    #[arg(long)]
    oracle_every: Option<usize>,
}

#[derive(Debug, Args)]
struct ContinuousArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "spread")]
    env: String,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    episode_length: Option<usize>,
    #[arg(long)]
    collision_radius: Option<f64>,
    #[arg(long)]
    replay_capacity: Option<usize>,
    /// Refresh importance ratios only for sampled entries.
    #[arg(long)]
    lazy_refresh: bool,
    #[arg(long)]
    consensus_rounds: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    critic_step: Option<f64>,
    #[arg(long)]
    actor_step: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    target_step: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    eval_episodes: Option<usize>,
}

#[derive(Debug, Args)]
struct ConsensusArgs {
    #[command(flatten)]
    common: Common,
    /// `ring:N`, `complete:N`, `path:N` or an edge-list file.
    #[arg(long)]
    graph: Option<String>,
    /// Comma-separated initial values, one per node.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct Theorem1Args {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Args)]
struct Theorem2Args {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mdps: Option<usize>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mdp_seed: Option<u64>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    /// Step budget shared by every method.
    #[arg(long)]
    steps: Option<u64>,
    /// Comma-separated methods; the first is the one under test.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_omega(schedule: &mut StepSizeSchedule, omega: Option<f64>) {
    if let Some(exponent) = omega {
        let scale = match schedule {
            StepSizeSchedule::Polynomial { scale, .. } => *scale,
            StepSizeSchedule::Constant { .. } => 1.0,
        };
        *schedule = StepSizeSchedule::Polynomial { scale, exponent };
    }
}

fn base_config(kind: ExperimentKind, common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
            toml::from_str::<ExperimentConfig>(&text)?
        }
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        return Err(HarnessError::Config(format!(
            "config describes a {} experiment, not {}",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    set(&mut cfg.seeds, common.seeds.clone());
    Ok(cfg)
}

fn build(command: &Command) -> Result<(ExperimentConfig, &Common), HarnessError> {
    Ok(match command {
        Command::TrainTabular(a) => {
            let mut cfg = base_config(ExperimentKind::Tabular, &a.common)?;
            let t = &mut cfg.tabular;
            if a.mdp_seed.is_some() {
                t.mdp_seed = a.mdp_seed;
            }
            set(&mut t.states, a.states);
            set(&mut t.agents, a.agents);
            set(&mut t.actions, a.actions);
            set(&mut t.gamma, a.gamma);
            set(&mut t.train.steps, a.steps);
            set_omega(&mut t.train.critic_schedule, a.omega);
            set(&mut t.train.actor_step, a.beta);
            if let Some(c) = a.clip {
                (t.train.clip_min, t.train.clip_max) = (-c, c);
            }
            set(&mut t.train.episode_length, a.episode_length);
            t.train.sequential |= a.sequential;
            if a.oracle_every.is_some() {
                t.train.oracle_every_episodes = a.oracle_every;
            }
            (cfg, &a.common)
        }
        Command::TrainContinuous(a) => {
            if a.env != "spread" {
                return Err(HarnessError::Config(format!("unknown environment {:?}", a.env)));
            }
            let mut cfg = base_config(ExperimentKind::Continuous, &a.common)?;
            let c = &mut cfg.continuous;
            set(&mut c.train.env.num_agents, a.agents);
            set(&mut c.train.steps, a.steps);
            set(&mut c.train.env.episode_length, a.episode_length);
            set(&mut c.train.env.collision_radius, a.collision_radius);
            set(&mut c.train.agent.replay_capacity, a.replay_capacity);
            c.train.lazy_refresh |= a.lazy_refresh;
            set(&mut c.train.consensus_rounds, a.consensus_rounds);
            set(&mut c.train.agent.hidden, a.hidden.clone());
            set(&mut c.train.agent.batch_size, a.batch_size);
            set(&mut c.train.agent.critic_step, a.critic_step);
            set(&mut c.train.agent.actor_step, a.actor_step);
            set(&mut c.train.agent.momentum, a.momentum);
            set(&mut c.train.agent.target_step, a.target_step);
            set(&mut c.train.agent.gamma, a.gamma);
            set(&mut c.train.topology, a.topology.clone());
            set(&mut c.eval_episodes, a.eval_episodes);
            (cfg, &a.common)
        }
        Command::ConsensusDemo(a) => {
            let mut cfg = base_config(ExperimentKind::ConsensusDemo, &a.common)?;
            set(&mut cfg.consensus.graph, a.graph.clone());
            set(&mut cfg.consensus.x0, a.x0.clone());
            set(&mut cfg.consensus.tol, a.tol);
            set(&mut cfg.consensus.max_iters, a.max_iters);
            (cfg, &a.common)
        }
        Command::VerifyTheorem1(a) => {
            let mut cfg = base_config(ExperimentKind::VerifyTheorem1, &a.common)?;
            let t = &mut cfg.theorem1;
            set(&mut t.states, a.states);
            set(&mut t.agents, a.agents);
            set(&mut t.actions, a.actions);
            set(&mut t.gamma, a.gamma);
            set(&mut t.steps, a.steps);
            set_omega(&mut t.schedule, a.omega);
            set(&mut t.tol, a.tol);
            (cfg, &a.common)
        }
        Command::VerifyTheorem2(a) => {
            let mut cfg = base_config(ExperimentKind::VerifyTheorem2, &a.common)?;
            let t = &mut cfg.theorem2;
            set(&mut t.num_mdps, a.mdps);
            set(&mut t.states, a.states);
            set(&mut t.agents, a.agents);
            set(&mut t.actions, a.actions);
            set(&mut t.gamma, a.gamma);
            set(&mut t.max_rounds, a.max_rounds);
            (cfg, &a.common)
        }
        Command::Compare(a) => {
            let mut cfg = base_config(ExperimentKind::Compare, &a.common)?;
            let t = &mut cfg.tabular;
            if a.mdp_seed.is_some() {
                t.mdp_seed = a.mdp_seed;
            }
            set(&mut t.states, a.states);
            set(&mut t.agents, a.agents);
            set(&mut t.actions, a.actions);
            set(&mut t.train.actor_step, a.beta);
            set_omega(&mut t.train.critic_schedule, a.omega);
            if let Some(methods) = &a.methods {
                let steps = cfg.compare.methods.first().map_or(t.train.steps, |m| m.steps);
                cfg.compare.methods = methods
                    .iter()
                    .map(|&method| decmarl_harness::config::MethodBudget { method, steps })
                    .collect();
            }
            if let Some(steps) = a.steps {
                cfg.compare.methods.iter_mut().for_each(|m| m.steps = steps);
            }
            set(&mut cfg.compare.epsilon, a.epsilon);
            (cfg, &a.common)
        }
    })
}

fn emit(output: &ExperimentOutput, out: Option<&Path>) -> Result<(), HarnessError> {
    // a closed stdout (e.g. piped into `head`) must not abort the run
    let mut stdout = std::io::stdout().lock();
    for c in &output.checks {
        let _ = writeln!(stdout, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    match out {
        Some(path) if path.extension().is_some_and(|e| e == "csv") => {
            let [(_, bytes)] = output.files.as_slice() else {
                return Err(HarnessError::Config(format!(
                    "{} curves produced; pass a directory to --out",
                    output.files.len()
                )));
            };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
            }
            std::fs::write(path, bytes).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
            let summary = path.with_extension("summary.json");
            std::fs::write(&summary, output.summary_json()? + "\n")
                .map_err(|e| HarnessError::Io(summary.display().to_string(), e))?;
        }
        Some(dir) => output.write_to(dir)?,
        None => {
            let _ = writeln!(stdout, "{}", output.summary_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (config, common) = match build(&cli.command) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let output = match run_experiment(&config).and_then(|o| emit(&o, common.out.as_deref()).map(|_| o)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if common.assert && !output.passed() {
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
