//! Experiment runners. Each returns an [`ExperimentOutput`] holding the JSON
//! summary, pass/fail checks and the CSV files to write.

use std::path::Path;

use decmarl::consensus::{max_deviation, CommGraph, ConsensusError, ConsensusKernel};
use decmarl::continuous::{self, ContinuousConfig};
use decmarl::envs::{SpreadEnv, SPREAD_ACTION_DIM};
use decmarl::mdp::{self, JointPolicy, Mdp};
use decmarl::tabular::{self, QLearningConfig, TabularConfig, TrainingLog};
use decmarl::seeded_rng;
use serde::{Deserialize, Serialize};

use crate::config::{ConsensusDemoConfig, ExperimentConfig, ExperimentKind, Method, TabularExperiment};
use crate::HarnessError;

/// Offset separating evaluation episodes from training episodes.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

/// One acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Everything an experiment produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub kind: ExperimentKind,
    pub summary: serde_json::Value,
    pub checks: Vec<Check>,
    /// `(file name, contents)` pairs, one curve per seed where applicable.
    pub files: Vec<(String, Vec<u8>)>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Summary document including the checks.
    pub fn summary_json(&self) -> Result<String, HarnessError> {
        let doc = serde_json::json!({
            "kind": self.kind.name(),
            "passed": self.passed(),
            "checks": self.checks,
            "results": self.summary,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Writes every file plus `summary.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        }
        let path = dir.join("summary.json");
        std::fs::write(&path, self.summary_json()? + "\n").map_err(|e| HarnessError::Io(path.display().to_string(), e))
    }
}

/// Validates `config` and runs the experiment it describes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    match config.kind {
        ExperimentKind::Tabular => run_tabular(config),
        ExperimentKind::Continuous => run_continuous(config),
        ExperimentKind::ConsensusDemo => consensus_demo(&config.consensus),
        ExperimentKind::VerifyTheorem1 => verify_theorem1(config),
        ExperimentKind::VerifyTheorem2 => verify_theorem2(config),
        ExperimentKind::Compare => crate::compare::compare_baselines(config),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation (0 for fewer than two values).
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub(crate) fn build_mdp(exp: &TabularExperiment, seed: u64) -> Result<Mdp, HarnessError> {
    Ok(Mdp::generate_random(
        exp.mdp_seed_for(seed),
        exp.states,
        &vec![exp.actions; exp.agents],
        exp.gamma,
    )?)
}

/// Curve statistics derived only from the rows written to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStats {
    /// Mean of the last 10% of curve rows (at least one).
    pub final_return: f64,
    /// Mean of all curve rows.
    pub auc: f64,
    /// First logged step whose mean return reaches the threshold.
    pub steps_to_threshold: Option<u64>,
}

impl CurveStats {
    pub fn from_rows(rows: &[(u64, f64)], threshold: f64) -> Self {
        let returns: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let k = returns.len().div_ceil(10).max(1).min(returns.len().max(1));
        Self {
            final_return: mean(&returns[returns.len().saturating_sub(k)..]),
            auc: mean(&returns),
            steps_to_threshold: rows.iter().find(|r| r.1 >= threshold).map(|r| r.0),
        }
    }
}

/// `step,mean_return[,q_residual_i...]`.
/// `step,mean_return[,q_residual_i...]`.
pub fn tabular_curve_csv(log: &TrainingLog) -> Result<Vec<u8>, HarnessError> {
    let n_res = log.curve.iter().find_map(|p| p.q_residuals.as_ref().map(Vec::len)).unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "mean_return".to_string()];
    header.extend((0..n_res).map(|i| format!("q_residual_{i}")));
    w.write_record(&header)?;
    for p in &log.curve {
        let mut row = vec![p.step.to_string(), p.mean_return.to_string()];
        match &p.q_residuals {
            Some(r) => row.extend(r.iter().map(f64::to_string)),
            None => row.extend((0..n_res).map(|_| String::new())),
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, HarnessError> {
    w.into_inner().map_err(|e| HarnessError::Csv(e.to_string()))
}

fn curve_rows(log: &TrainingLog) -> Vec<(u64, f64)> {
    log.curve.iter().map(|p| (p.step, p.mean_return)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSeedResult {
    pub seed: u64,
    pub mdp_seed: u64,
    pub random_policy_return: f64,
    pub final_policy_return: f64,
    #[serde(flatten)]
    pub stats: CurveStats,
}

fn run_tabular(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let exp = &config.tabular;
    let mut results = Vec::new();
    let mut files = Vec::new();
    for &seed in &config.seeds {
        let mdp = build_mdp(exp, seed)?;
        let train = TabularConfig { seed, ..exp.train.clone() };
        let log = tabular::train_tabular(&mdp, &train)?;
        let random = tabular::random_policy_return(&mdp, train.episode_length)?;
        let threshold = exp.return_threshold.unwrap_or(random);
        results.push(TabularSeedResult {
            seed,
            mdp_seed: exp.mdp_seed_for(seed),
            random_policy_return: random,
            final_policy_return: tabular::policy_return(&mdp, &log.policy_tables, train.episode_length)?,
            stats: CurveStats::from_rows(&curve_rows(&log), threshold),
        });
        files.push((format!("seed_{seed}.csv"), tabular_curve_csv(&log)?));
    }
    let finals: Vec<f64> = results.iter().map(|r| r.stats.final_return).collect();
    let beats = results.iter().filter(|r| r.stats.final_return > r.random_policy_return).count();
    let checks = vec![Check::new(
        "beats-random-policy",
        beats == results.len(),
        format!("{beats}/{} seeds end above the uniform-random-policy return", results.len()),
    )];
    let summary = serde_json::json!({
        "seeds": results,
        "final_return_mean": mean(&finals),
        "final_return_std": std_dev(&finals),
    });
    Ok(ExperimentOutput {
        kind: ExperimentKind::Tabular,
        summary,
        checks,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSeedResult {
    pub seed: u64,
    pub episodes: usize,
    pub first_window_return: f64,
    pub last_window_return: f64,
    pub initial_policy_return: f64,
    pub initial_policy_distance: f64,
    pub trained_policy_return: f64,
    pub trained_policy_distance: f64,
}

impl ContinuousSeedResult {
    pub fn improved(&self) -> bool {
        self.last_window_return > self.first_window_return && self.trained_policy_distance < self.initial_policy_distance
    }
}

/// Trains on the navigation task for one seed and scores the frozen initial
/// and the trained policies on the same evaluation episodes.
pub fn continuous_seed(train: &ContinuousConfig, seed: u64, window: usize, eval_episodes: usize) -> Result<(ContinuousSeedResult, Vec<u8>), HarnessError> {
    let cfg = ContinuousConfig { seed, ..train.clone() };
    let run = continuous::train_spread(&cfg, None)?;
    let mut env = SpreadEnv::new(cfg.env.clone(), &mut seeded_rng(seed))?;
    let n = cfg.env.num_agents;
    let initial = continuous::make_continuous_agents(n, cfg.env.observation_dim(), SPREAD_ACTION_DIM, &cfg.agent, seed, None)?;
    let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);
    let (r0, d0) = continuous::evaluate_policies(&mut env, &initial, eval_episodes, eval_seed)?;
    let (r1, d1) = continuous::evaluate_policies(&mut env, &run.agents, eval_episodes, eval_seed)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "mean_return", "critic_loss", "mean_abs_c", "final_distance"])?;
    for e in &run.log.episodes {
        w.write_record([
            e.episode.to_string(),
            e.mean_return.to_string(),
            e.critic_loss.to_string(),
            e.mean_abs_c.to_string(),
            e.final_distance.to_string(),
        ])?;
    }
    let result = ContinuousSeedResult {
        seed,
        episodes: run.log.episodes.len(),
        first_window_return: run.log.first_mean_return(window),
        last_window_return: run.log.last_mean_return(window),
        initial_policy_return: r0,
        initial_policy_distance: d0,
        trained_policy_return: r1,
        trained_policy_distance: d1,
    };
    Ok((result, finish_csv(w)?))
}

fn run_continuous(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let exp = &config.continuous;
    let mut results = Vec::new();
    let mut files = Vec::new();
    for &seed in &config.seeds {
        let (result, csv) = continuous_seed(&exp.train, seed, exp.window, exp.eval_episodes)?;
        results.push(result);
        files.push((format!("seed_{seed}.csv"), csv));
    }
    let improved = results.iter().filter(|r| r.improved()).count();
    let needed = (2 * results.len()).div_ceil(3);
    let checks = vec![Check::new(
        "learning-progress",
        improved >= needed,
        format!(
            "{improved}/{} seeds improve both windowed return and final distance (need {needed})",
            results.len()
        ),
    )];
    let lasts: Vec<f64> = results.iter().map(|r| r.last_window_return).collect();
    let summary = serde_json::json!({
        "seeds": results,
        "last_window_return_mean": mean(&lasts),
        "last_window_return_std": std_dev(&lasts),
    });
    Ok(ExperimentOutput {
        kind: ExperimentKind::Continuous,
        summary,
        checks,
        files,
    })
}

/// Accepts `ring:N` style names or a path to an edge-list file.
pub fn load_graph(desc: &str) -> Result<CommGraph, HarnessError> {
    match desc.parse::<CommGraph>() {
        Ok(g) => Ok(g),
        Err(named) => {
            let path = Path::new(desc);
            if path.exists() {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(desc.to_string(), e))?;
                Ok(CommGraph::parse_edge_list(&text)?)
            } else {
                Err(named.into())
            }
        }
    }
}

fn consensus_demo(cfg: &ConsensusDemoConfig) -> Result<ExperimentOutput, HarnessError> {
    let graph = load_graph(&cfg.graph)?;
    if graph.num_nodes() != cfg.x0.len() {
        return Err(HarnessError::Config(format!(
            "{} initial values for a {}-node graph",
            cfg.x0.len(),
            graph.num_nodes()
        )));
    }
    let kernel = ConsensusKernel::build(&graph)?;
    let mean = mean(&cfg.x0);
    let (x, iterations, converged) = match kernel.run_to_consensus(&cfg.x0, cfg.tol, cfg.max_iters) {
        Ok(run) => (run.x, run.iters, true),
        Err(ConsensusError::Timeout { iters, x, .. }) => (x, iters, false),
        Err(e) => return Err(e.into()),
    };
    let deviation = max_deviation(&x, mean);
    let checks = vec![Check::new(
        "reaches-average",
        converged && deviation < cfg.tol,
        format!("max deviation {deviation:e} after {iterations} iterations"),
    )];
    let summary = serde_json::json!({
        "graph": cfg.graph,
        "limit": mean,
        "iterations": iterations,
        "x": x,
        "max_deviation": deviation,
    });
    Ok(ExperimentOutput {
        kind: ExperimentKind::ConsensusDemo,
        summary,
        checks,
        files: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1SeedResult {
    pub seed: u64,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Critic learning under frozen random policies, compared with the exact
/// local action values of those policies.
pub fn theorem1_seed(config: &ExperimentConfig, seed: u64) -> Result<(Theorem1SeedResult, TrainingLog), HarnessError> {
    let t1 = &config.theorem1;
    let mdp = Mdp::generate_random(seed, t1.states, &vec![t1.actions; t1.agents], t1.gamma)?;
    let policy = JointPolicy::random(&mdp, &mut seeded_rng(seed.wrapping_add(EVAL_SEED_OFFSET)));
    let train = TabularConfig {
        steps: t1.steps,
        episode_length: t1.episode_length,
        critic_schedule: t1.schedule,
        actor_step: 0.0,
        seed,
        ..TabularConfig::default()
    };
    let mut agents = tabular::make_agents(&mdp, &train, None)?;
    for (i, agent) in agents.iter_mut().enumerate() {
        for s in 0..mdp.num_states() {
            let logits: Vec<f64> = policy.row(i, s).iter().map(|p| p.ln()).collect();
            agent.set_logits_row(s, &logits)?;
        }
    }
    let log = tabular::train_tabular_with(&mdp, &train, agents, None)?;
    let frozen = JointPolicy::new(mdp.num_states(), log.policy_tables.clone(), mdp.action_sizes().to_vec())?;
    let residuals = (0..mdp.num_agents())
        .map(|i| {
            let exact = mdp::exact_local_q(&mdp, &frozen, i)?;
            Ok(exact
                .iter()
                .zip(&log.q_tables[i])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>, HarnessError>>()?;
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok((
        Theorem1SeedResult {
            seed,
            residuals,
            max_residual,
        },
        log,
    ))
}

fn verify_theorem1(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let mut results = Vec::new();
    let mut files = Vec::new();
    for &seed in &config.seeds {
        let (r, log) = theorem1_seed(config, seed)?;
        results.push(r);
        files.push((format!("seed_{seed}.csv"), tabular_curve_csv(&log)?));
    }
    let worst = results.iter().map(|r| r.max_residual).fold(0.0, f64::max);
    let checks = vec![Check::new(
        "critic-matches-exact-q",
        worst < config.theorem1.tol,
        format!("max |Q_t - Q_pi| = {worst:.6} (tolerance {})", config.theorem1.tol),
    )];
    Ok(ExperimentOutput {
        kind: ExperimentKind::VerifyTheorem1,
        summary: serde_json::json!({ "seeds": results, "max_residual": worst }),
        checks,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Run {
    pub mdp_seed: u64,
    pub rounds: usize,
    pub converged_at: Option<usize>,
    pub worst_step: f64,
    pub monotone: bool,
}

/// Exact alternating improvement on `num_mdps` random instances per seed.
pub fn theorem2_runs(config: &ExperimentConfig, seed: u64) -> Result<Vec<Theorem2Run>, HarnessError> {
    let t2 = &config.theorem2;
    (0..t2.num_mdps as u64)
        .map(|k| {
            let mdp_seed = seed.wrapping_mul(10_007).wrapping_add(k);
            let mdp = Mdp::generate_random(mdp_seed, t2.states, &vec![t2.actions; t2.agents], t2.gamma)?;
            let initial = JointPolicy::random(&mdp, &mut seeded_rng(mdp_seed.wrapping_add(EVAL_SEED_OFFSET)));
            let trace = tabular::alternating_improvement(&mdp, initial, t2.max_rounds)?;
            Ok(Theorem2Run {
                mdp_seed,
                rounds: trace.values.len() - 1,
                converged_at: trace.converged_at,
                worst_step: trace.worst_step(),
                monotone: trace.is_monotone(t2.tol),
            })
        })
        .collect()
}

fn verify_theorem2(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        runs.extend(theorem2_runs(config, seed)?);
    }
    let monotone = runs.iter().all(|r| r.monotone);
    let converged = runs.iter().all(|r| r.converged_at.is_some());
    let max_rounds = runs.iter().filter_map(|r| r.converged_at).max().unwrap_or(0);
    let checks = vec![
        Check::new(
            "monotone-values",
            monotone,
            format!(
                "worst per-state change {:e}",
                runs.iter().map(|r| r.worst_step).fold(f64::INFINITY, f64::min)
            ),
        ),
        Check::new(
            "terminates",
            converged,
            format!(
                "{}/{} runs stable within {} rounds (slowest {max_rounds})",
                runs.iter().filter(|r| r.converged_at.is_some()).count(),
                runs.len(),
                config.theorem2.max_rounds
            ),
        ),
    ];
    Ok(ExperimentOutput {
        kind: ExperimentKind::VerifyTheorem2,
        summary: serde_json::json!({ "runs": runs, "monotone": monotone, "rounds_to_convergence": max_rounds }),
        checks,
        files: Vec::new(),
    })
}

/// Runs `method` on `mdp` for the budget in `train.steps`.
pub fn run_method(method: Method, mdp: &Mdp, train: &TabularConfig, epsilon: f64, max_joint_actions: usize) -> Result<TrainingLog, HarnessError> {
    Ok(match method {
        Method::Decentralized => tabular::train_tabular(mdp, train)?,
        Method::Centralized => tabular::train_tabular(&mdp.as_single_agent(), train)?,
        Method::QLearning => {
            let q = QLearningConfig {
                steps: train.steps,
                episode_length: train.episode_length,
                critic_schedule: train.critic_schedule,
                epsilon,
                seed: train.seed,
                max_joint_actions,
                log_every_episodes: train.log_every_episodes,
            };
            tabular::joint_q_learning_baseline(mdp, &q)?
        }
    })
}
