//! Tabular decentralized actor-critic.
//!
//! Every agent keeps a Q-table over `(state, own action)` and a table of
//! softmax logits. Each tick the critic takes a stochastic-approximation step
//! towards `r + γ Q(s', ã)` with `ã` drawn fresh from the agent's own policy,
//! and the actor takes a small gradient-ascent step on `Σ_a π(s,a) Q(s,a)`
//! followed by clipping of the logits. Critic steps decay per visited pair and
//! always dominate actor steps by a configured ratio, so the critic tracks a
//! quasi-stationary joint policy.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{record_read, AccessAudit, ParamBlock, Phase};
use crate::mdp::{self, JointPolicy, Mdp, MdpError};
use crate::{seeded_rng, SimRng};

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("joint action space of {size} exceeds the cap of {cap}")]
    JointSpaceTooLarge { size: usize, cap: usize },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

pub type Result<T> = std::result::Result<T, TabularError>;

/// Step-size rule as a function of how often a pair has been updated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSizeSchedule {
    /// `scale / (1 + visits)^exponent`.
    Polynomial { scale: f64, exponent: f64 },
    Constant { value: f64 },
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        Self::Polynomial {
            scale: 1.0,
            exponent: 0.7,
        }
    }
}

impl StepSizeSchedule {
    pub fn rate(&self, visits: u64) -> f64 {
        match *self {
            Self::Polynomial { scale, exponent } => scale / (1.0 + visits as f64).powf(exponent),
            Self::Constant { value } => value,
        }
    }

    /// Checks the conditions under which a per-pair critic schedule converges:
    /// rates in `[0, 1]`, divergent sum and summable squares.
    pub fn validate_critic(&self) -> Result<()> {
        match *self {
            Self::Polynomial { scale, exponent } => {
                if !(exponent > 0.5 && exponent <= 1.0) {
                    return Err(TabularError::Config(format!(
                        "critic exponent {exponent} outside (0.5, 1]"
                    )));
                }
                if !(scale > 0.0 && scale <= 1.0) {
                    return Err(TabularError::Config(format!("critic scale {scale} outside (0, 1]")));
                }
                Ok(())
            }
            Self::Constant { .. } => Err(TabularError::Config(
                "a constant critic step has a non-summable square".into(),
            )),
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_policy(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of `J(ζ) = Σ_a softmax(ζ)_a q_a`, i.e. `π ⊙ (q - v)` with
/// `v = Σ_a π_a q_a`.
pub fn policy_gradient(logits: &[f64], q: &[f64]) -> Vec<f64> {
    let pi = softmax_policy(logits);
    let baseline: f64 = pi.iter().zip(q).map(|(p, v)| p * v).sum();
    pi.iter().zip(q).map(|(p, v)| p * (v - baseline)).collect()
}

/// One agent's Q-table and policy table.
#[derive(Debug, Clone)]
pub struct TabularAgent {
    id: usize,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    q: Vec<f64>,
    logits: Vec<f64>,
    visits: Vec<u64>,
    clip_min: f64,
    clip_max: f64,
    audit: Option<AccessAudit>,
}

impl TabularAgent {
    /// Zero Q-table, uniform policy.
    pub fn new(id: usize, num_states: usize, num_actions: usize, gamma: f64, clip_min: f64, clip_max: f64) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(TabularError::Config("agent needs states and actions".into()));
        }
        if !(clip_min < clip_max) || !clip_min.is_finite() || !clip_max.is_finite() {
            return Err(TabularError::Config(format!("clip bounds [{clip_min}, {clip_max}] are not ordered")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::Config(format!("discount {gamma} outside [0, 1)")));
        }
        let init = 0.0f64.clamp(clip_min, clip_max);
        Ok(Self {
            id,
            num_states,
            num_actions,
            gamma,
            q: vec![0.0; num_states * num_actions],
            logits: vec![init; num_states * num_actions],
            visits: vec![0; num_states * num_actions],
            clip_min,
            clip_max,
            audit: None,
        })
    }

    pub fn with_audit(mut self, audit: AccessAudit) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn q_table(&self) -> &[f64] {
        &self.q
    }

    pub fn q_row(&self, state: usize) -> &[f64] {
        &self.q[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn logits_row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn visits(&self, state: usize, action: usize) -> u64 {
        self.visits[state * self.num_actions + action]
    }

    pub fn clip_bounds(&self) -> (f64, f64) {
        (self.clip_min, self.clip_max)
    }

    /// Overwrites the logits of one state (clipped).
    pub fn set_logits_row(&mut self, state: usize, row: &[f64]) -> Result<()> {
        self.check_state(state)?;
        if row.len() != self.num_actions {
            return Err(TabularError::OutOfRange(format!("row of length {}", row.len())));
        }
        let (lo, hi) = (self.clip_min, self.clip_max);
        for (dst, &z) in self.logits[state * self.num_actions..(state + 1) * self.num_actions].iter_mut().zip(row) {
            *dst = z.clamp(lo, hi);
        }
        Ok(())
    }

    pub fn set_q_table(&mut self, q: &[f64]) -> Result<()> {
        if q.len() != self.q.len() {
            return Err(TabularError::OutOfRange(format!("table of length {}", q.len())));
        }
        self.q.copy_from_slice(q);
        Ok(())
    }

    pub fn policy_row(&self, state: usize) -> Vec<f64> {
        softmax_policy(self.logits_row(state))
    }

    /// Whole policy table, row-major `(state, action)`.
    pub fn policy_table(&self) -> Vec<f64> {
        (0..self.num_states).flat_map(|s| self.policy_row(s)).collect()
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(TabularError::OutOfRange(format!("state {state} of {}", self.num_states)));
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action >= self.num_actions {
            return Err(TabularError::OutOfRange(format!("action {action} of {}", self.num_actions)));
        }
        Ok(())
    }

    pub fn sample_action(&self, state: usize, rng: &mut SimRng) -> Result<usize> {
        self.check_state(state)?;
        record_read(&self.audit, self.id, ParamBlock::PolicyTable);
        Ok(mdp::sample_index(&self.policy_row(state), rng.random::<f64>()))
    }

    /// `Q(s,a) += α (r + γ Q(s', ã) - Q(s,a))`; only that entry changes.
    /// Returns the new value.
    #[allow(clippy::too_many_arguments)]
    pub fn q_update(&mut self, state: usize, action: usize, reward: f64, next_state: usize, fresh_next_action: usize, alpha: f64) -> Result<f64> {
        self.check_state(state)?;
        self.check_state(next_state)?;
        self.check_action(action)?;
        self.check_action(fresh_next_action)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(TabularError::Config(format!("critic step {alpha} outside [0, 1]")));
        }
        record_read(&self.audit, self.id, ParamBlock::QTable);
        let idx = state * self.num_actions + action;
        let target = reward + self.gamma * self.q[next_state * self.num_actions + fresh_next_action];
        self.q[idx] += alpha * (target - self.q[idx]);
        self.visits[idx] += 1;
        Ok(self.q[idx])
    }

    /// `ζ(s,·) += β π(s,·) ⊙ (Q(s,·) - v(s))`, then clip to the bounds.
    /// Returns the updated row.
    pub fn policy_gradient_step(&mut self, state: usize, beta: f64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if !(beta >= 0.0) {
            return Err(TabularError::Config(format!("actor step {beta} is negative")));
        }
        record_read(&self.audit, self.id, ParamBlock::QTable);
        record_read(&self.audit, self.id, ParamBlock::PolicyTable);
        let range = state * self.num_actions..(state + 1) * self.num_actions;
        let grad = policy_gradient(&self.logits[range.clone()], &self.q[range.clone()]);
        let (lo, hi) = (self.clip_min, self.clip_max);
        for (z, g) in self.logits[range.clone()].iter_mut().zip(grad) {
            *z = (*z + beta * g).clamp(lo, hi);
        }
        Ok(self.logits[range].to_vec())
    }
}

/// Replaces agent `agent`'s policy by the greedy one with respect to its exact
/// local Q, leaving every other agent untouched.
///
/// Where the incumbent row already attains the maximal expected Q (for
/// instance a constant row) it is kept; otherwise the row becomes a point
/// mass on the first maximizer.
pub fn exact_policy_improvement(mdp: &Mdp, policy: &JointPolicy, agent: usize) -> Result<JointPolicy> {
    let q = mdp::exact_local_q(mdp, policy, agent)?;
    let n = mdp.action_sizes()[agent];
    let mut next = policy.clone();
    for s in 0..mdp.num_states() {
        let row_q = &q[s * n..(s + 1) * n];
        let (best, best_val) = row_q
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (a, v)| if v > acc.1 { (a, v) } else { acc });
        let incumbent: f64 = policy.row(agent, s).iter().zip(row_q).map(|(p, v)| p * v).sum();
        if incumbent >= best_val - 1e-12 * (1.0 + best_val.abs()) {
            continue;
        }
        let mut row = vec![0.0; n];
        row[best] = 1.0;
        next.set_row(agent, s, &row);
    }
    Ok(next)
}

/// Outcome of a sequence of exact improvement rounds.
#[derive(Debug, Clone)]
pub struct ImprovementTrace {
    /// `V^{π_k}` for every round, starting with the initial policy.
    pub values: Vec<Vec<f64>>,
    pub final_policy: JointPolicy,
    /// Round index at which a full rotation over all agents changed nothing.
    pub converged_at: Option<usize>,
}

impl ImprovementTrace {
    /// Smallest `V^{π_{k+1}}(s) - V^{π_k}(s)` over all rounds and states.
    pub fn worst_step(&self) -> f64 {
        self.values
            .windows(2)
            .flat_map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.worst_step() >= -tol
    }
}

/// Round `k` improves agent `k mod N`; stops once `N` consecutive rounds leave
/// the policy unchanged or `max_rounds` is reached.
pub fn alternating_improvement(mdp: &Mdp, initial: JointPolicy, max_rounds: usize) -> Result<ImprovementTrace> {
    let n_agents = mdp.num_agents();
    let mut policy = initial;
    let mut values = vec![mdp::exact_state_values(mdp, &policy)?];
    let mut unchanged = 0;
    let mut converged_at = None;
    for round in 0..max_rounds {
        let next = exact_policy_improvement(mdp, &policy, round % n_agents)?;
        if next == policy {
            unchanged += 1;
        } else {
            unchanged = 0;
        }
        policy = next;
        values.push(mdp::exact_state_values(mdp, &policy)?);
        if unchanged >= n_agents {
            converged_at = Some(round + 1);
            break;
        }
    }
    Ok(ImprovementTrace {
        values,
        final_policy: policy,
        converged_at,
    })
}

/// Hyperparameters of the tabular learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub steps: u64,
    pub episode_length: usize,
    pub critic_schedule: StepSizeSchedule,
    /// Upper bound on the actor step β.
    pub actor_step: f64,
    /// The actor step is capped at `α / timescale_ratio` for the critic step
    /// `α` taken in the same tick; must be at least 10.
    pub timescale_ratio: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
    /// Only agent `t mod N` improves at tick `t`.
    pub sequential: bool,
    /// Episodes averaged into one curve point.
    pub log_every_episodes: usize,
    /// Compute `max |Q^i - Q^i_π|` against the exact oracle every this many
    /// episodes.
    pub oracle_every_episodes: Option<usize>,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            episode_length: 100,
            critic_schedule: StepSizeSchedule::default(),
            actor_step: 0.01,
            timescale_ratio: 10.0,
            clip_min: -5.0,
            clip_max: 5.0,
            seed: 0,
            sequential: false,
            log_every_episodes: 1,
            oracle_every_episodes: None,
        }
    }
}

impl TabularConfig {
    pub fn validate(&self) -> Result<()> {
        self.critic_schedule.validate_critic()?;
        if !(self.actor_step >= 0.0) {
            return Err(TabularError::Config(format!("actor step {} is negative", self.actor_step)));
        }
        if !(self.timescale_ratio >= 10.0) {
            return Err(TabularError::Config(format!(
                "timescale ratio {} must be at least 10",
                self.timescale_ratio
            )));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(TabularError::Config("clip_min must be below clip_max".into()));
        }
        if self.episode_length == 0 || self.log_every_episodes == 0 {
            return Err(TabularError::Config("episode length and log interval must be positive".into()));
        }
        if self.oracle_every_episodes == Some(0) {
            return Err(TabularError::Config("oracle interval must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Environment steps taken when the point was logged.
    pub step: u64,
    /// Mean undiscounted episode return over the logging window.
    pub mean_return: f64,
    /// Per-agent `max |Q^i_t - Q^i_π_t|` when the oracle is enabled.
    pub q_residuals: Option<Vec<f64>>,
}

/// Output shared by the tabular learners.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub curve: Vec<CurvePoint>,
    pub episode_returns: Vec<f64>,
    pub q_tables: Vec<Vec<f64>>,
    /// Final per-agent policy tables (empty for Q-learning).
    pub policy_tables: Vec<Vec<f64>>,
}

impl TrainingLog {
    /// Mean of the last `fraction` of episode returns (at least one).
    pub fn final_mean_return(&self, fraction: f64) -> f64 {
        let n = self.episode_returns.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        self.episode_returns[n - k..].iter().sum::<f64>() / k as f64
    }

    /// Area under the learning curve, normalized to the mean episode return.
    pub fn auc(&self) -> f64 {
        self.episode_returns.iter().sum::<f64>() / self.episode_returns.len().max(1) as f64
    }
}

struct EpisodeLogger {
    episode_length: usize,
    log_every: usize,
    current: f64,
    window: Vec<f64>,
    returns: Vec<f64>,
    curve: Vec<CurvePoint>,
}

impl EpisodeLogger {
    fn new(episode_length: usize, log_every: usize) -> Self {
        Self {
            episode_length,
            log_every,
            current: 0.0,
            window: Vec::new(),
            returns: Vec::new(),
            curve: Vec::new(),
        }
    }

    /// Adds the reward of step `t` (0-based). Returns true when an episode
    /// just ended.
    fn record(&mut self, t: u64, reward: f64, residuals: impl FnOnce(usize) -> Option<Vec<f64>>) -> bool {
        self.current += reward;
        if !(t + 1).is_multiple_of(self.episode_length as u64) {
            return false;
        }
        self.returns.push(self.current);
        self.window.push(self.current);
        self.current = 0.0;
        if self.window.len() == self.log_every {
            let mean_return = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.window.clear();
            self.curve.push(CurvePoint {
                step: t + 1,
                mean_return,
                q_residuals: residuals(self.returns.len()),
            });
        }
        true
    }
}

fn reset_state(mdp: &Mdp, rng: &mut SimRng) -> usize {
    rng.random_range(0..mdp.num_states())
}

/// Exact expected return of one episode under uniformly random actions from a
/// uniformly random start state.
pub fn random_policy_return(mdp: &Mdp, episode_length: usize) -> Result<f64> {
    let start = vec![1.0 / mdp.num_states() as f64; mdp.num_states()];
    Ok(mdp::finite_horizon_return(mdp, &JointPolicy::uniform(mdp), &start, episode_length)?)
}

/// Exact expected episode return of the product of the given policy tables.
pub fn policy_return(mdp: &Mdp, tables: &[Vec<f64>], episode_length: usize) -> Result<f64> {
    let policy = JointPolicy::new(mdp.num_states(), tables.to_vec(), mdp.action_sizes().to_vec())?;
    let start = vec![1.0 / mdp.num_states() as f64; mdp.num_states()];
    Ok(mdp::finite_horizon_return(mdp, &policy, &start, episode_length)?)
}

/// Builds one agent per entry of `mdp.action_sizes()`.
pub fn make_agents(mdp: &Mdp, config: &TabularConfig, audit: Option<&AccessAudit>) -> Result<Vec<TabularAgent>> {
    mdp.action_sizes()
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let agent = TabularAgent::new(i, mdp.num_states(), n, mdp.gamma(), config.clip_min, config.clip_max)?;
            Ok(match audit {
                Some(a) => agent.with_audit(a.clone()),
                None => agent,
            })
        })
        .collect()
}

fn current_policy(mdp: &Mdp, agents: &[TabularAgent]) -> Result<JointPolicy> {
    Ok(JointPolicy::new(
        mdp.num_states(),
        agents.iter().map(TabularAgent::policy_table).collect(),
        mdp.action_sizes().to_vec(),
    )?)
}

fn q_residuals(mdp: &Mdp, agents: &[TabularAgent]) -> Result<Vec<f64>> {
    let policy = current_policy(mdp, agents)?;
    agents
        .iter()
        .enumerate()
        .map(|(i, agent)| {
            let exact = mdp::exact_local_q(mdp, &policy, i)?;
            Ok(exact
                .iter()
                .zip(agent.q_table())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Runs the decentralized tabular actor-critic on `mdp` (one learner per
/// agent). Passing `mdp.as_single_agent()` gives the centralized variant.
pub fn train_tabular(mdp: &Mdp, config: &TabularConfig) -> Result<TrainingLog> {
    let agents = make_agents(mdp, config, None)?;
    train_tabular_with(mdp, config, agents, None)
}

/// [`train_tabular`] with caller-supplied agents (e.g. preloaded tables) and
/// an optional audit that receives phase markers and the executing agent.
pub fn train_tabular_with(mdp: &Mdp, config: &TabularConfig, mut agents: Vec<TabularAgent>, audit: Option<&AccessAudit>) -> Result<TrainingLog> {
    config.validate()?;
    if agents.len() != mdp.num_agents() {
        return Err(TabularError::Config(format!("{} agents for an MDP with {}", agents.len(), mdp.num_agents())));
    }
    let n_agents = agents.len();
    let mut master = seeded_rng(config.seed);
    let mut env_rng = seeded_rng(master.random());
    let mut agent_rngs: Vec<SimRng> = (0..n_agents).map(|_| seeded_rng(master.random())).collect();
    let mut logger = EpisodeLogger::new(config.episode_length, config.log_every_episodes);
    let mut local = vec![0usize; n_agents];
    let mut state = reset_state(mdp, &mut env_rng);
    let mut oracle_error = None;

    let enter = |i: usize| {
        if let Some(a) = audit {
            a.enter(i);
        }
    };
    let leave = || {
        if let Some(a) = audit {
            a.leave();
        }
    };
    let phase = |t: u64, p: Phase| {
        if let Some(a) = audit {
            a.phase(t, p);
        }
    };

    for t in 0..config.steps {
        if t > 0 && t % config.episode_length as u64 == 0 {
            state = reset_state(mdp, &mut env_rng);
        }
        phase(t, Phase::Act);
        for (i, agent) in agents.iter().enumerate() {
            enter(i);
            local[i] = agent.sample_action(state, &mut agent_rngs[i])?;
            leave();
        }
        phase(t, Phase::EnvStep);
        let joint = mdp.encode_joint(&local)?;
        let (next_state, reward) = mdp.step(state, joint, &mut env_rng)?;

        phase(t, Phase::Evaluate);
        let mut alphas = vec![0.0; n_agents];
        for (i, agent) in agents.iter_mut().enumerate() {
            enter(i);
            let fresh = agent.sample_action(next_state, &mut agent_rngs[i])?;
            let alpha = config.critic_schedule.rate(agent.visits(state, local[i]));
            agent.q_update(state, local[i], reward, next_state, fresh, alpha)?;
            alphas[i] = alpha;
            leave();
        }
        phase(t, Phase::Improve);
        for (i, agent) in agents.iter_mut().enumerate() {
            if config.sequential && (t % n_agents as u64) as usize != i {
                continue;
            }
            enter(i);
            let beta = config.actor_step.min(alphas[i] / config.timescale_ratio);
            agent.policy_gradient_step(state, beta)?;
            leave();
        }

        let oracle_every = config.oracle_every_episodes;
        logger.record(t, reward, |episodes| {
            let every = oracle_every?;
            if episodes % every != 0 {
                return None;
            }
            match q_residuals(mdp, &agents) {
                Ok(r) => Some(r),
                Err(e) => {
                    oracle_error = Some(e);
                    None
                }
            }
        });
        if let Some(e) = oracle_error.take() {
            return Err(e);
        }
        state = next_state;
    }
    Ok(TrainingLog {
        curve: logger.curve,
        episode_returns: logger.returns,
        q_tables: agents.iter().map(|a| a.q_table().to_vec()).collect(),
        policy_tables: agents.iter().map(TabularAgent::policy_table).collect(),
    })
}

/// Max `|Q^i - Q^i_π|` per agent for agents whose policies are currently
/// frozen at `policy`.
pub fn residual_to_exact(mdp: &Mdp, agents: &[TabularAgent]) -> Result<Vec<f64>> {
    q_residuals(mdp, agents)
}

/// ε-greedy Q-learning over the joint action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub steps: u64,
    pub episode_length: usize,
    pub critic_schedule: StepSizeSchedule,
    pub epsilon: f64,
    pub seed: u64,
    /// Largest joint action space the baseline agrees to enumerate.
    pub max_joint_actions: usize,
    pub log_every_episodes: usize,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            episode_length: 100,
            critic_schedule: StepSizeSchedule::default(),
            epsilon: 0.1,
            seed: 0,
            max_joint_actions: 4096,
            log_every_episodes: 1,
        }
    }
}

/// Greedy action of one row, ties broken uniformly at random.
fn greedy(row: &[f64], rng: &mut SimRng) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..row.len()).filter(|&a| row[a] == best).collect();
    *ties.choose(rng).unwrap_or(&0)
}

/// Deterministic greedy joint policy (first maximizer) of a joint Q-table.
pub fn greedy_actions(mdp: &Mdp, q: &[f64]) -> Vec<usize> {
    let n = mdp.num_joint_actions();
    (0..mdp.num_states())
        .map(|s| {
            let row = &q[s * n..(s + 1) * n];
            (0..n).fold(0, |best, a| if row[a] > row[best] { a } else { best })
        })
        .collect()
}

pub fn joint_q_learning_baseline(mdp: &Mdp, config: &QLearningConfig) -> Result<TrainingLog> {
    let size = mdp.num_joint_actions();
    if size > config.max_joint_actions {
        return Err(TabularError::JointSpaceTooLarge {
            size,
            cap: config.max_joint_actions,
        });
    }
    config.critic_schedule.validate_critic()?;
    if !(0.0..=1.0).contains(&config.epsilon) {
        return Err(TabularError::Config(format!("epsilon {} outside [0, 1]", config.epsilon)));
    }
    if config.episode_length == 0 || config.log_every_episodes == 0 {
        return Err(TabularError::Config("episode length and log interval must be positive".into()));
    }
    let mut master = seeded_rng(config.seed);
    let mut env_rng = seeded_rng(master.random());
    let mut rng = seeded_rng(master.random());
    let mut q = vec![0.0; mdp.num_states() * size];
    let mut visits = vec![0u64; q.len()];
    let mut logger = EpisodeLogger::new(config.episode_length, config.log_every_episodes);
    let mut state = reset_state(mdp, &mut env_rng);
    for t in 0..config.steps {
        if t > 0 && t % config.episode_length as u64 == 0 {
            state = reset_state(mdp, &mut env_rng);
        }
        let action = if rng.random::<f64>() < config.epsilon {
            rng.random_range(0..size)
        } else {
            greedy(&q[state * size..(state + 1) * size], &mut rng)
        };
        let (next, reward) = mdp.step(state, action, &mut env_rng)?;
        let idx = state * size + action;
        let alpha = config.critic_schedule.rate(visits[idx]);
        let best_next = q[next * size..(next + 1) * size].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        q[idx] += alpha * (reward + mdp.gamma() * best_next - q[idx]);
        visits[idx] += 1;
        logger.record(t, reward, |_| None);
        state = next;
    }
    Ok(TrainingLog {
        curve: logger.curve,
        episode_returns: logger.returns,
        q_tables: vec![q],
        policy_tables: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(states: usize, actions: usize, gamma: f64) -> TabularAgent {
        TabularAgent::new(0, states, actions, gamma, -5.0, 5.0).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_policy(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let shifted = softmax_policy(&[100.3, 99.1, 101.0]);
        let base = softmax_policy(&[0.3, -0.9, 1.0]);
        for (a, b) in shifted.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = softmax_policy(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax_policy(&[-700.0, 700.0]).iter().all(|&v| v.is_finite()));
    }

    #[test]
    fn q_update_examples() {
        let mut a = agent(2, 2, 0.9);
        assert_eq!(a.q_update(0, 1, 1.0, 1, 0, 0.5).unwrap(), 0.5);
        assert_eq!(a.q_table(), &[0.0, 0.5, 0.0, 0.0]);
        assert_eq!(a.visits(0, 1), 1);
        let before = a.q_table().to_vec();
        a.q_update(1, 0, 3.0, 0, 1, 0.0).unwrap();
        assert_eq!(a.q_table(), &before[..]);
        assert!(a.q_update(2, 0, 0.0, 0, 0, 0.1).is_err());
        assert!(a.q_update(0, 0, 0.0, 0, 2, 0.1).is_err());
        assert!(a.q_update(0, 0, 0.0, 0, 0, 1.5).is_err());
    }

    #[test]
    fn robbins_monro_reaches_geometric_value() {
        // with a deterministic target the error obeys e <- (1 - (1-γ)α) e,
        // so the harmonic schedule leaves 10 Π_k (1 - 0.1/(1+k)) behind
        let mut a = agent(1, 1, 0.9);
        let mut predicted_gap = 10.0;
        let mut last_gap = f64::INFINITY;
        for t in 0..200_000u64 {
            let alpha = 1.0 / (1.0 + t as f64);
            a.q_update(0, 0, 1.0, 0, 0, alpha).unwrap();
            predicted_gap *= 1.0 - 0.1 * alpha;
            let gap = 10.0 - a.q_table()[0];
            assert!(gap <= last_gap);
            last_gap = gap;
        }
        assert!((last_gap - predicted_gap).abs() < 1e-9, "{last_gap} vs {predicted_gap}");

        let mut b = agent(1, 1, 0.9);
        let schedule = StepSizeSchedule::default();
        for _ in 0..200_000u64 {
            let alpha = schedule.rate(b.visits(0, 0));
            b.q_update(0, 0, 1.0, 0, 0, alpha).unwrap();
        }
        let mdp = Mdp::new(1, vec![1], vec![1.0], vec![1.0], 0.9).unwrap();
        let exact = mdp::exact_local_q(&mdp, &JointPolicy::uniform(&mdp), 0).unwrap();
        assert!((b.q_table()[0] - exact[0]).abs() < 1e-3, "q = {}", b.q_table()[0]);
    }

    #[test]
    fn gradient_step_examples() {
        let g = policy_gradient(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
        assert!(policy_gradient(&[0.4, -1.0, 2.0], &[3.0; 3]).iter().all(|v| v.abs() < 1e-15));

        let mut a = agent(1, 3, 0.9);
        a.set_q_table(&[1.0, 1.0, 1.0]).unwrap();
        a.set_logits_row(0, &[0.2, 0.1, -0.3]).unwrap();
        assert_eq!(a.policy_gradient_step(0, 0.7).unwrap(), vec![0.2, 0.1, -0.3]);

        a.set_logits_row(0, &[6.0, -7.0, 0.0]).unwrap();
        assert_eq!(a.logits_row(0), &[5.0, -5.0, 0.0]);
        a.set_q_table(&[1.0, 0.0, 0.0]).unwrap();
        let row = a.policy_gradient_step(0, 100.0).unwrap();
        assert!(row.iter().all(|z| (-5.0..=5.0).contains(z)));
        assert!(a.policy_gradient_step(0, -1.0).is_err());
    }

    #[test]
    fn improvement_examples() {
        // Q^0(s,·) = (1, 2): single state, one agent, gamma 0
        let mdp = Mdp::new(1, vec![2], vec![1.0, 1.0], vec![1.0, 2.0], 0.0).unwrap();
        let policy = JointPolicy::uniform(&mdp);
        let next = exact_policy_improvement(&mdp, &policy, 0).unwrap();
        assert_eq!(next.row(0, 0), &[0.0, 1.0]);

        let flat = Mdp::new(1, vec![2], vec![1.0, 1.0], vec![0.5, 0.5], 0.0).unwrap();
        let p = JointPolicy::new(1, vec![vec![0.3, 0.7]], vec![2]).unwrap();
        assert_eq!(exact_policy_improvement(&flat, &p, 0).unwrap(), p);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSizeSchedule::Polynomial { scale: 1.0, exponent: 0.5 }.validate_critic().is_err());
        assert!(StepSizeSchedule::Polynomial { scale: 1.0, exponent: 1.0 }.validate_critic().is_ok());
        assert!(StepSizeSchedule::Polynomial { scale: 1.5, exponent: 0.7 }.validate_critic().is_err());
        assert!(StepSizeSchedule::Constant { value: 0.1 }.validate_critic().is_err());
        let cfg = TabularConfig {
            critic_schedule: StepSizeSchedule::Polynomial { scale: 1.0, exponent: 1.2 },
            ..Default::default()
        };
        let mdp = Mdp::generate_random(0, 2, &[2], 0.9).unwrap();
        assert!(matches!(train_tabular(&mdp, &cfg), Err(TabularError::Config(_))));
        let cfg = TabularConfig {
            timescale_ratio: 5.0,
            ..Default::default()
        };
        assert!(train_tabular(&mdp, &cfg).is_err());
    }

    #[test]
    fn joint_space_cap_is_enforced() {
        let mdp = Mdp::generate_random(0, 2, &[3, 3, 3], 0.9).unwrap();
        let cfg = QLearningConfig {
            max_joint_actions: 10,
            ..Default::default()
        };
        match joint_q_learning_baseline(&mdp, &cfg) {
            Err(TabularError::JointSpaceTooLarge { size: 27, cap: 10 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn first_q_learning_update_uses_max_target() {
        // one state, two joint actions, deterministic: first update from zero
        // table gives α r because max_a' Q(s', a') = 0.
        let mdp = Mdp::new(1, vec![2], vec![1.0, 1.0], vec![1.0, 1.0], 0.9).unwrap();
        let cfg = QLearningConfig {
            steps: 1,
            episode_length: 1,
            ..Default::default()
        };
        let log = joint_q_learning_baseline(&mdp, &cfg).unwrap();
        let q = &log.q_tables[0];
        assert_eq!(q.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(q.iter().filter(|&&v| v == 0.0).count(), 1);
    }
}
